"""A short tour of the tape-based autodiff.

Builds a tiny conv -> relu -> mean graph by hand, reads the gradients off the
tape, then lets the finite-difference checker confirm them.
"""

import numpy as np

from physfed import autodiff as ad

rng = np.random.default_rng(0)
tape = ad.Tape()
x = tape.leaf(rng.normal(size=(1, 6, 6)), name="x")
w = tape.leaf(rng.normal(size=(2, 1, 3, 3)), name="w")
b = tape.leaf(np.zeros(2), name="b")

loss = ad.mean(ad.relu(ad.conv2d(x, w, b)))
grads = tape.backward(loss)
print("loss", float(loss.data))
print("dL/db", grads[b.node_id])
print("tape length", len(tape.nodes))


def graph(t, v):
    return ad.mean(ad.relu(ad.conv2d(v["x"], v["w"], v["b"])))


report = ad.finite_diff_check(graph, {"x": x.data, "w": w.data, "b": b.data + 0.1}, tol=1e-5)
for name, err in report.max_rel_error.items():
    print(f"{name}: max relative error {err:.2e}")
print("passed" if report.passed else "FAILED")
