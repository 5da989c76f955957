"""Acceptance criteria, one test each.

Every test appends a ``PASS``/``FAIL``/``SKIP`` line that pytest prints in an
"acceptance criteria" section at the end of the run:

    pytest tests/test_acceptance.py -v
"""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fercnn import tensor
from fercnn.labels import N_CLASSES
from fercnn.layers import BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, Mode, ReLU, init_params
from fercnn.metrics import accuracy, confusion_from_labels, macro_f1
from fercnn.model import (
    ArchConfig, CheckpointError, build_model, load_checkpoint, predict, save_checkpoint,
)
from fercnn.optim import softmax_cross_entropy
from fercnn.train import evaluate, fit

from conftest import ACCEPTANCE_LINES, toy_dataset
from oracles import (
    conv2d_loops, grad_error, maxpool_loops, model_fd_errors, numeric_grad,
    recount_accuracy, recount_macro_f1,
)

SEEDS = range(20)
SURROGATE = ArchConfig(input_size=10, filters=(2, 3), dense_units=(4,), n_classes=3)


def record(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


# -- gradient suite -------------------------------------------------------------

def _layer_cases(rng):
    conv_in = rng.integers(1, 4)
    return {
        "conv3x1": (Conv2D(3, 1, conv_in, 3, np.float64), rng.standard_normal((2, 5, 4, conv_in))),
        "conv1x3": (Conv2D(1, 3, conv_in, 3, np.float64), rng.standard_normal((2, 4, 5, conv_in))),
        "dense": (Dense(6, 4, np.float64), rng.standard_normal((3, 6))),
        "batchnorm": (BatchNorm(3, dtype=np.float64), rng.standard_normal((4, 2, 2, 3))),
        "relu": (ReLU(), rng.standard_normal((3, 7))),
        "maxpool": (MaxPool2D(), rng.standard_normal((2, 4, 6, 2))),
        "flatten": (Flatten(), rng.standard_normal((2, 3, 3, 2))),
    }


def _layer_errors(layer, x, r):
    layer.forward(x, Mode.TRAIN)
    gx = layer.backward(r)

    def f():
        return float((layer.forward(x, Mode.TRAIN) * r).sum())

    errs = [grad_error(gx, numeric_grad(f, x, 1e-6))]
    errs += [grad_error(layer.grads[n], numeric_grad(f, p, 1e-6)) for n, p in layer.params.items()]
    return max(errs)


def test_gradient_suite():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, (layer, x) in _layer_cases(rng).items():
            init_params(layer, seed)
            r = rng.standard_normal(layer.forward(x, Mode.TRAIN).shape)
            worst[name] = max(worst.get(name, 0.0), _layer_errors(layer, x, r))
        logits = rng.standard_normal((5, N_CLASSES))
        labels = rng.integers(0, N_CLASSES, 5)
        g = softmax_cross_entropy(logits, labels)[1]
        num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits, 1e-6)
        worst["softmax-xent"] = max(worst.get("softmax-xent", 0.0), grad_error(g, num))

    end_to_end = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(100 + seed)
        model = build_model(seed, SURROGATE, np.float64)
        x = rng.random((6, 10, 10, 1))
        labels = rng.integers(0, SURROGATE.n_classes, 6)
        errs = model_fd_errors(model, x, labels, softmax_cross_entropy)
        end_to_end = max(end_to_end, max(errs.values()))
    elapsed = time.perf_counter() - start

    layers_ok = max(worst.values()) < 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient suite, layers (20 seeds, rel < 1e-5)", layers_ok, detail)
    record("gradient suite, end-to-end surrogate (20 seeds, rel < 1e-4)", end_to_end < 1e-4,
           f"worst {end_to_end:.1e}")
    record("gradient suite runtime < 120 s", elapsed < 120, f"{elapsed:.1f} s")


# -- oracle suite ---------------------------------------------------------------

def test_oracle_suite():
    rng = np.random.default_rng(2024)
    conv_worst = pool_worst = 0.0
    pool_arg_ok = True
    for _ in range(200):
        kh, kw = (3, 1) if rng.random() < 0.5 else (1, 3)
        n, h, w = rng.integers(1, 3), rng.integers(kh, 7), rng.integers(kw, 7)
        cin, cout = rng.integers(1, 4), rng.integers(1, 4)
        x = rng.standard_normal((n, h, w, cin))
        k = rng.standard_normal((kh, kw, cin, cout))
        b = rng.standard_normal(cout)
        conv_worst = max(conv_worst, float(np.abs(tensor.conv2d_valid(x, k, b) - conv2d_loops(x, k, b)).max()))

        xp = rng.standard_normal((rng.integers(1, 3), 2 * rng.integers(1, 5), 2 * rng.integers(1, 5), rng.integers(1, 4)))
        if rng.random() < 0.3:
            xp = np.round(xp)  # force ties
        out, index = tensor.maxpool2d(xp)
        ref, arg = maxpool_loops(xp)
        pool_worst = max(pool_worst, float(np.abs(out - ref).max()))
        pool_arg_ok &= bool(np.array_equal(index.window, arg))
    record("oracle suite, conv2d (200 cases, abs <= 1e-12)", conv_worst <= 1e-12, f"worst {conv_worst:.1e}")
    record("oracle suite, maxpool (200 cases, abs <= 1e-12, ties top-left)",
           pool_worst <= 1e-12 and pool_arg_ok, f"worst {pool_worst:.1e}, argmax match {pool_arg_ok}")

    t = rng.integers(0, N_CLASSES, 1000)
    p = np.where(rng.random(1000) < 0.4, t, rng.integers(0, N_CLASSES, 1000))
    cm = confusion_from_labels(t, p)
    acc_ok = accuracy(cm) == recount_accuracy(t.tolist(), p.tolist())
    f1_ok = macro_f1(cm) == recount_macro_f1(t.tolist(), p.tolist())
    record("oracle suite, accuracy and macro-F1 recount (1000 pairs, exact)", acc_ok and f1_ok,
           f"accuracy {accuracy(cm):.6f}, macro-F1 {macro_f1(cm):.6f}")


# -- shape chain ----------------------------------------------------------------

EXPECTED_CHAIN = [
    (1, 46, 48, 64), (1, 46, 46, 64), (1, 23, 23, 64),
    (1, 21, 23, 128), (1, 21, 21, 128), (1, 10, 10, 128),
    (1, 8, 10, 256), (1, 8, 8, 256), (1, 4, 4, 256),
    (1, 2, 4, 512), (1, 2, 2, 512), (1, 1, 1, 512),
    (1, 512), (1, 512), (1, 256), (1, 7),
]


def test_shape_chain():
    chain = [s for _, s in build_model(0).trace_shapes(np.zeros((1, 48, 48, 1), np.float32))]
    record("shape chain (16 stages, 48x48x1 -> 1x1x512 -> 512 -> 7)", chain == EXPECTED_CHAIN,
           " -> ".join("x".join(map(str, s[1:])) for s in chain))


# -- training behaviour -----------------------------------------------------------

def test_overfit():
    ds = toy_dataset(10, seed=21)
    model = build_model(0)
    start = time.perf_counter()
    history = fit(model, ds, None, epochs=300, batch_size=14, lr=0.001, seed=0,
                  stop_when=lambda r: r.train_accuracy >= 0.99)
    elapsed = time.perf_counter() - start
    best = max(r.train_accuracy for r in history)
    record("overfit (70 samples, >= 99% train accuracy within 300 epochs)", best >= 0.99,
           f"{best:.3f} at epoch {len(history)}")
    record("overfit runtime < 300 s", elapsed < 300, f"{elapsed:.1f} s")


def test_generalization():
    train_set, val_set = toy_dataset(100, seed=11), toy_dataset(20, seed=12)
    model = build_model(0)
    start = time.perf_counter()
    history = fit(model, train_set, val_set, epochs=50, batch_size=32, lr=0.001, seed=0,
                  stop_when=lambda r: r.val_accuracy >= 0.90 and r.val_macro_f1 >= 0.85)
    elapsed = time.perf_counter() - start
    last = history[-1]
    ok = last.val_accuracy >= 0.90 and last.val_macro_f1 >= 0.85
    record("generalization (700/140, val accuracy >= 0.90, macro-F1 >= 0.85, <= 50 epochs)", ok,
           f"accuracy {last.val_accuracy:.3f}, macro-F1 {last.val_macro_f1:.3f} at epoch {last.epoch}")
    record("generalization runtime < 900 s", elapsed < 900, f"{elapsed:.1f} s")


def test_determinism():
    ds = toy_dataset(3, seed=5)
    probe = toy_dataset(1, seed=6)
    runs = []
    with threadpool_limits(limits=1):
        for _ in range(2):
            model = build_model(7)
            history = fit(model, ds, None, epochs=3, batch_size=7, seed=7)
            runs.append(([r.loss for r in history], evaluate(model, probe)[1]))
    (l1, p1), (l2, p2) = runs
    diff = max(abs(a - b) for a, b in zip(l1, l2))
    ok = diff <= 1e-6 and np.array_equal(p1, p2)
    record("determinism (two single-threaded runs)", ok,
           f"max loss diff {diff:.1e}, predictions identical {np.array_equal(p1, p2)}")


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = build_model(3)
    ds = toy_dataset(2, seed=8)
    fit(model, ds, None, epochs=1, batch_size=7)  # move the batchnorm statistics off their defaults
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded, _ = load_checkpoint(path)
    x = np.random.default_rng(1).random((4, 48, 48, 1)).astype(np.float32)
    bitwise = np.array_equal(predict(model, x)[1], predict(loaded, x)[1])

    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(bytes(raw))
    other = tmp_path / "other.ckpt"
    save_checkpoint(build_model(0, SURROGATE), other)
    rejected = []
    for bad in (corrupt, other):
        try:
            load_checkpoint(bad)
            rejected.append(False)
        except CheckpointError:
            rejected.append(True)
    record("checkpoint round-trip (bitwise Infer outputs; corrupt and mismatched rejected)",
           bitwise and all(rejected), f"bitwise {bitwise}, corrupt rejected {rejected[0]}, "
           f"mismatched rejected {rejected[1]}")


def test_loss_sanity():
    worst = 0.0
    for seed in range(5):
        ds = toy_dataset(2, seed=30 + seed)
        model = build_model(seed)
        x = ds.images.astype(np.float32) / 255
        for mode in (Mode.TRAIN, Mode.INFER):
            loss = softmax_cross_entropy(model.forward_logits(x, mode), ds.labels)[0]
            worst = max(worst, abs(loss - math.log(7)))
    record("loss sanity (untrained cross-entropy within 0.15 of ln 7)", worst <= 0.15,
           f"worst |loss - ln 7| {worst:.3f} over 5 seeds, Train and Infer modes")


def test_headline_numbers_not_reproducible():
    ACCEPTANCE_LINES.append(
        "SKIP  full-corpus benchmark: needs the licensed Aff-Wild2 frames (~2.7M) "
        "and ~100 epochs at batch 512; the property checks above stand in for it")
    pytest.skip("requires the full licensed corpus")
