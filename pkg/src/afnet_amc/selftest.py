"""Fast in-process checks run by ``afnet selftest``.

Each check returns ``(name, passed, detail)``. Gradient checks run in
float64 on tiny shapes so the whole suite takes well under a minute.
"""

from __future__ import annotations

import numpy as np

from . import core
from . import model as M
from . import training as T

GRAD_TOL = 1e-4


def _projected(forward, backward, shape_out, rng):
    """Scalar loss sum(out * r) for a fixed random projection r."""
    r = rng.uniform(-1, 1, shape_out)

    def fn(point):
        out, cache = forward(point)
        return float(np.sum(out * r)), backward(r, cache)

    return fn


def sample_away_from_kinks(draw, relu_inputs_of, margin=1e-3, tries=50):
    """Redraw a random point until no ReLU input lies within ``margin`` of 0."""
    for _ in range(tries):
        point = draw()
        zs = relu_inputs_of(point)
        if all(np.min(np.abs(z)) > margin for z in zs if np.size(z)):
            return point
    raise RuntimeError("could not find a point away from ReLU kinks")


def layer_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error for each primitive layer."""
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-1, 1, s)  # noqa: E731
    errs = {}
    with core.precision("float64"):
        x, k = u(1, 9, 4), u(1, 3, 2, 4)

        def conv_fn(p):
            out, c = core.conv2d_forward(p["x"], p["k"], 2, (1, 2), "same")
            return out, c

        fn = _projected(conv_fn, lambda r, c: dict(zip(("x", "k"), core.conv2d_backward(r, c))), (1, 9, 4), rng)
        errs["conv2d"] = core.finite_diff_check(fn, {"x": x, "k": k})

        x, k = u(2, 2, 7, 1), u(2, 5, 1, 3)
        fn = _projected(
            lambda p: core.conv2d_forward(p["x"], p["k"], 1, (1, 1), ("valid", "same")),
            lambda r, c: dict(zip(("x", "k"), core.conv2d_backward(r, c))),
            (2, 1, 7, 3),
            rng,
        )
        errs["conv2d_stem"] = core.finite_diff_check(fn, {"x": x, "k": k})

        # distinct values keep the max unique under +-eps perturbation
        x = rng.permutation(np.linspace(-1, 1, 2 * 8 * 3)).reshape(2, 1, 8, 3)
        fn = _projected(
            lambda p: core.maxpool2d_forward(p["x"]),
            lambda r, c: {"x": core.maxpool2d_backward(r, c)},
            (2, 1, 4, 3),
            rng,
        )
        errs["maxpool2d"] = core.finite_diff_check(fn, {"x": x})

        fn = _projected(
            lambda p: core.global_avg_pool_forward(p["x"]),
            lambda r, c: {"x": core.global_avg_pool_backward(r, c)},
            (2, 3),
            rng,
        )
        errs["global_avg_pool"] = core.finite_diff_check(fn, {"x": u(2, 1, 5, 3)})

        def dense_bwd(r, c):
            dx, dw, db = core.dense_backward(r, c)
            return {"x": dx, "w": dw, "b": db}

        fn = _projected(lambda p: core.dense_forward(p["x"], p["w"], p["b"]), dense_bwd, (3, 4), rng)
        errs["dense"] = core.finite_diff_check(fn, {"x": u(3, 5), "w": u(5, 4), "b": u(4)})

        x = u(20)
        x[np.abs(x) < 1e-3] = 0.5
        fn = _projected(lambda p: core.relu_forward(p["x"]), lambda r, c: {"x": core.relu_backward(r, c)}, (20,), rng)
        errs["relu"] = core.finite_diff_check(fn, {"x": x})

        def smce(p):
            probs = core.softmax(p["z"])
            y = np.array([0, 2, 1])
            loss = -np.log(probs[np.arange(3), y]).sum()
            d = probs.copy()
            d[np.arange(3), y] -= 1
            return float(loss), {"z": d}

        errs["softmax_ce"] = core.finite_diff_check(smce, {"z": u(3, 4)})
    return errs


def fusion_gradient_error(seed: int = 1, lam: float = 2.0) -> float:
    rng = np.random.default_rng(seed)
    with core.precision("float64"):
        c, d = 8, 2

        def draw():
            return {
                "A": rng.uniform(-1, 1, (2, 1, 6, c)),
                "B": rng.uniform(-1, 1, (2, 1, 6, c)),
                "w1": rng.uniform(-1, 1, (c, d)),
                "w2": rng.uniform(-1, 1, (d, c)),
                "w3": rng.uniform(-1, 1, (d, c)),
            }

        def relus(p):
            zs = []
            M.fusion_forward(p["A"], p["B"], p["w1"], p["w2"], p["w3"], lam, zs)
            return zs

        point = sample_away_from_kinks(draw, relus)
        r = rng.uniform(-1, 1, (2, 1, 6, c))

        def fn(p):
            out, cache = M.fusion_forward(p["A"], p["B"], p["w1"], p["w2"], p["w3"], lam)
            grads = dict(zip(("A", "B", "w1", "w2", "w3"), M.fusion_backward(r, cache)))
            return float(np.sum(out * r)), grads

        return core.finite_diff_check(fn, point)


def af_unit_gradient_error(seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(channels=8, compression=4, units=1, pool_after=(), groups=2, num_classes=3, frame_length=8)
    with core.precision("float64"):

        def draw():
            p = {k: v for k, v in M.init_params(cfg, int(rng.integers(1 << 30)), head_init="he").items() if k.startswith("unit1.")}
            p["X"] = rng.uniform(-1, 1, (2, 1, 8, 8))
            return p

        def relus(p):
            zs = []
            M.af_unit_forward(p["X"], p, "unit1", cfg.groups, zs)
            return zs

        point = sample_away_from_kinks(draw, relus)
        r = rng.uniform(-1, 1, (2, 1, 8, 8))

        def fn(p):
            out, cache = M.af_unit_forward(p["X"], p, "unit1", cfg.groups)
            grads: dict = {}
            grads["X"] = M.af_unit_backward(r, cache, grads)
            return float(np.sum(out * r)), grads

        return core.finite_diff_check(fn, point)


TINY = M.ModelConfig(channels=8, compression=4, units=2, pool_after=(1, 2), groups=2, num_classes=4, frame_length=16)


def afnet_gradient_error(seed: int = 3, weighted: bool = True) -> float:
    """Full tiny network, mean (weighted) CE loss, 64-bit."""
    rng = np.random.default_rng(seed)
    cfg = TINY
    with core.precision("float64"):
        x = rng.uniform(-1, 1, (4, 2, cfg.frame_length))
        y = rng.integers(0, cfg.num_classes, 4)
        w = rng.uniform(0, 1, 4) if weighted else None

        def draw():
            return M.init_params(cfg, int(rng.integers(1 << 30)), head_init="he")

        def relus(p):
            zs = []
            M.logits_forward(p, cfg, x, zs)
            return zs

        point = sample_away_from_kinks(draw, relus)
        return core.finite_diff_check(lambda p: M.loss_and_grad(p, cfg, x, y, w)[:2], point)


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, err in layer_gradient_errors().items():
        results.append((f"grad {name}", err < GRAD_TOL, f"{err:.2e}"))
    for lam in (1.0, 2.0):
        err = fusion_gradient_error(lam=lam)
        results.append((f"grad fusion lambda={lam:g}", err < GRAD_TOL, f"{err:.2e}"))
    err = af_unit_gradient_error()
    results.append(("grad af_unit", err < GRAD_TOL, f"{err:.2e}"))
    err = afnet_gradient_error()
    results.append(("grad afnet tiny", err < GRAD_TOL, f"{err:.2e}"))

    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 5, (2, 10_000, 8))
    lam = rng.choice([1.0, 2.0], (10_000, 1))
    al, be = M.lambda_softmax(a, b, lam)
    err = float(np.max(np.abs(al + be - lam)))
    results.append(("lambda-softmax sum", err < 1e-12, f"{err:.1e}"))
    t = rng.normal(0, 10, (10_000, 1))
    al2, _ = M.lambda_softmax(a + t, b + t, lam)
    err = float(np.max(np.abs(al2 - al)))
    results.append(("lambda-softmax shift", err < 1e-9, f"{err:.1e}"))

    for c, r, want in ((48, 16, 432), (48, 8, 864)):
        cfg = M.ModelConfig(channels=c, compression=r, units=1, pool_after=())
        p = M.init_params(cfg, 0)
        n = sum(p[f"unit1.fuse1.{w}"].size for w in ("w1", "w2", "w3"))
        ok = n == want == M.count_fusion_params(c, r)
        results.append((f"fusion params C={c} r={r}", ok, str(n)))

    uni = np.full(11, 1 / 11)
    y = np.eye(11)[0]
    err = abs(T.ce_loss(uni, y) - np.log(11))
    results.append(("ce uniform = ln 11", err < 1e-9, f"{err:.1e}"))
    w = T.confidence_weight(np.eye(11)[3], 3)
    results.append(("weight one-hot = 1", w == 1.0, repr(w)))
    w = T.confidence_weight([0.5, 0.25, 0.25] + [0] * 8, 3)
    results.append(("weight k=3 example", abs(w - 0.0536) < 1e-3, f"{w:.4f}"))
    return results
