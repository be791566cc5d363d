#!/usr/bin/env python3
"""End-to-end smoke test for the functa_py extension module.

Builds the cdylib if needed, then exercises every exposed type:
meta-learning a tiny base network, fitting modulations, training a flow,
a diffusion model, and a classifier on them, and round-tripping
checkpoints through save/load.

Run from the repository root:  python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_extension():
    """Compiles the extension and places functa_py.so on sys.path."""
    subprocess.run(
        ["cargo", "build", "--release", "-p", "functa-py"],
        cwd=ROOT,
        check=True,
    )
    src = os.path.join(ROOT, "target", "release", "libfuncta_py.so")
    dst_dir = os.path.join(ROOT, "target", "pydist")
    os.makedirs(dst_dir, exist_ok=True)
    dst = os.path.join(dst_dir, "functa_py.so")
    shutil.copyfile(src, dst)
    sys.path.insert(0, dst_dir)


def main():
    build_extension()
    import functa_py as fp

    res = 8
    coords = fp.grid_2d(res, res)

    # Meta-learn a tiny base network on synthetic blob images.
    learner = fp.MetaLearner(
        in_dim=2, out_dim=1, width=8, depth=2, latent_dim=8, outer_lr=1e-4, seed=0
    )
    items = [fp.make_blob_item(res, seed=0, index=i) for i in range(8)]
    first = last = None
    for step in range(5):
        batch = [(coords, items[(2 * step + j) % len(items)][0]) for j in range(2)]
        loss = learner.meta_step(batch)
        first = first if first is not None else loss
        last = loss
    assert math.isfinite(last), "meta loss not finite"
    print(f"meta-train: loss {first:.4f} -> {last:.4f}")

    # Fit per-item modulations.
    mods, labels = [], []
    for targets, label in items:
        phi, losses = learner.fit_modulation(coords, targets)
        assert losses[0] >= losses[-1], "inner loop did not reduce the loss"
        mods.append(phi)
        labels.append(label)
    psnr = fp.psnr(losses[-1])
    print(f"fit: {len(mods)} modulations, last-item PSNR {psnr:.2f} dB")

    # Dense forward pass and imputation from a half-observed image.
    preds = learner.forward(mods[0], coords)
    assert len(preds) == res * res and len(preds[0]) == 1
    observed = [i % 2 == 0 for i in range(res * res)]
    completed = learner.impute(coords, items[0][0], observed, steps=20)
    assert len(completed) == res * res
    print("forward/impute: shapes OK")

    # Flow over modulation space: exact log-density and sampling.
    flow = fp.Flow(dim=8, n_layers=2, hidden=16, seed=0)
    nll = flow.train(mods, iters=10, batch=8, lr=1e-3)
    lp = flow.log_prob(mods)
    samples = flow.sample(4, temperature=0.8, seed=1)
    assert len(samples) == 4 and len(samples[0]) == 8
    assert all(math.isfinite(v) for v in lp)
    print(f"flow: NLL {nll[0]:.3f} -> {nll[-1]:.3f}, sampled {len(samples)}")

    # Diffusion over modulation space.
    dd = fp.Ddpm(dim=8, width=16, n_blocks=1, schedule_steps=20, seed=0)
    dl = dd.train(mods, iters=10, batch=8)
    ds = dd.sample(3, seed=2)
    assert len(ds) == 3 and all(math.isfinite(v) for row in ds for v in row)
    print(f"ddpm: loss {dl[0]:.3f} -> {dl[-1]:.3f}, sampled {len(ds)}")

    # Classifier on modulations.
    clf = fp.Classifier(in_dim=8, n_classes=4, width=16, seed=0)
    _, ema = clf.train(mods, labels, iters=50, batch=8, lr=1e-3)
    acc = clf.evaluate(mods, labels)
    preds = clf.predict(mods)
    assert len(preds) == len(mods)
    print(f"classifier: EMA accuracy {ema:.3f}, eval accuracy {acc:.3f}")

    # Checkpoint round trips.
    with tempfile.TemporaryDirectory() as d:
        learner.save(os.path.join(d, "meta.ckpt"))
        flow.save(os.path.join(d, "flow.ckpt"))
        dd.save(os.path.join(d, "ddpm.ckpt"))
        clf.save(os.path.join(d, "clf.ckpt"))
        l2 = fp.MetaLearner.load(os.path.join(d, "meta.ckpt"))
        f2 = fp.Flow.load(os.path.join(d, "flow.ckpt"))
        d2 = fp.Ddpm.load(os.path.join(d, "ddpm.ckpt"))
        c2 = fp.Classifier.load(os.path.join(d, "clf.ckpt"))
        assert l2.forward(mods[0], coords) == learner.forward(mods[0], coords)
        assert f2.log_prob(mods) == lp
        assert d2.sample(3, seed=2) == ds
        assert c2.predict(mods) == preds
    print("checkpoint round trips: identical outputs")
    print("smoke test passed")


if __name__ == "__main__":
    main()
