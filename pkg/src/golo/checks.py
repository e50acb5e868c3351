"""Property suites behind ``golo check`` and ``golo gradcheck``.

Every check is a small function returning a :class:`CheckResult`; suites
group them and :func:`run_checks` turns a suite into a JSON-ready report.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from golo import losses as L
from golo import tensor as T
from golo.boxes import giou, xyxy_to_cxcywh
from golo.evaluate import ImagePredictions, ImageTruth, evaluate_detections
from golo.global_stage import AdaptiveMixing, MultiScaleFusion, mff_gather
from golo.local_stage import QGFE
from golo.matching import brute_force_match, hungarian
from golo.oracles import (naive_ap, naive_bidirectional, naive_focal, naive_giou, naive_level_weights,
                          naive_roi_align)
from golo.sampling import FeaturePyramid, SamplingSpec, bidirectional_sample, fpn_level, level_weights, roi_align
from golo.tensor import Tensor, finite_diff_check, precision

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""


def _timed(name: str, tolerance: float, fn: Callable[[], tuple], budget: float = math.inf) -> CheckResult:
    start = time.perf_counter()
    value, detail = fn()
    seconds = time.perf_counter() - start
    passed = bool(value <= tolerance) and seconds < budget
    if seconds >= budget:
        detail = f"{detail} over time budget {budget}s".strip()
    return CheckResult(name, passed, float(value), tolerance, round(seconds, 3), detail)


# ---------------------------------------------------------------------------
# shared fixtures

def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _nudged(rng, *shape):
    # keep values away from relu/abs/clamp kinks
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + 0.1, x)
    return Tensor(x, requires_grad=True)


OP_CASES = {
    "add": lambda r: ([a := leaf(r, 3, 4), b := leaf(r, 4)], lambda: a + b),
    "sub": lambda r: ([a := leaf(r, 3, 4), b := leaf(r, 3, 1)], lambda: a - b),
    "mul": lambda r: ([a := leaf(r, 2, 3), b := leaf(r, 2, 3)], lambda: a * b),
    "div": lambda r: ([a := leaf(r, 2, 3), b := Tensor(r.uniform(1, 2, (3,)), requires_grad=True)],
                      lambda: a / b),
    "pow": lambda r: ([a := Tensor(r.uniform(0.5, 2, (4,)), requires_grad=True)], lambda: a ** 3),
    "matmul": lambda r: ([a := leaf(r, 2, 3, 4), b := leaf(r, 4, 5)], lambda: a @ b),
    "softmax": lambda r: ([a := leaf(r, 3, 5)], lambda: T.softmax(a, 0)),
    "layer_norm": lambda r: ([a := leaf(r, 4, 6), g := leaf(r, 6), b := leaf(r, 6)],
                             lambda: T.layer_norm(a, g, b)),
    "relu": lambda r: ([a := _nudged(r, 3, 4)], lambda: T.relu(a)),
    "sigmoid": lambda r: ([a := leaf(r, 5)], lambda: T.sigmoid(a)),
    "tanh": lambda r: ([a := leaf(r, 5)], lambda: T.tanh(a)),
    "exp": lambda r: ([a := leaf(r, 5)], lambda: T.exp(a)),
    "log": lambda r: ([a := Tensor(r.uniform(0.5, 2, (5,)), requires_grad=True)], lambda: T.log(a)),
    "sqrt": lambda r: ([a := Tensor(r.uniform(0.5, 2, (5,)), requires_grad=True)], lambda: T.sqrt(a)),
    "log_sigmoid": lambda r: ([a := leaf(r, 5, scale=4)], lambda: T.log_sigmoid(a)),
    "abs": lambda r: ([a := _nudged(r, 5)], lambda: T.absolute(a)),
    "clamp": lambda r: ([a := _nudged(r, 6)], lambda: T.clamp(a, -0.5, 0.5)),
    "maximum": lambda r: ([a := leaf(r, 4), b := leaf(r, 4)], lambda: T.maximum(a, b)),
    "minimum": lambda r: ([a := leaf(r, 4), b := leaf(r, 4)], lambda: T.minimum(a, b)),
    "linear": lambda r: ([x := leaf(r, 3, 4), w := leaf(r, 4, 2), b := leaf(r, 2)],
                         lambda: T.linear(x, w, b)),
    "conv2d": lambda r: ([x := leaf(r, 2, 2, 6, 6), k := leaf(r, 3, 2, 3, 3), b := leaf(r, 3)],
                         lambda: T.conv2d(x, k, b, stride=2, pad=1)),
    "sum_mean": lambda r: ([a := leaf(r, 3, 4)], lambda: a.sum(axis=0) * a.mean(axis=1, keepdims=True)),
    "reshape_transpose": lambda r: ([a := leaf(r, 2, 3, 4)], lambda: a.reshape(6, 4).T),
    "getitem": lambda r: ([a := leaf(r, 5, 3)], lambda: a[np.array([0, 2, 2, 4])]),
    "concat": lambda r: ([a := leaf(r, 2, 3), b := leaf(r, 1, 3)], lambda: T.concat([a, b, a], 0)),
    "stack": lambda r: ([a := leaf(r, 2, 3), b := leaf(r, 2, 3)], lambda: T.stack([a, b], 1)),
    "repeat2x": lambda r: ([a := leaf(r, 2, 3, 3)], lambda: T.repeat2x(a)),
}


def random_pyramid(rng, c=4, size=64, batch=1):
    return FeaturePyramid([Tensor(rng.normal(size=(batch, c, size // s, size // s))) for s in (4, 8, 16, 32)])


def random_boxes(rng, shape, lo=0.1, hi=0.5):
    return np.concatenate([rng.uniform(0.25, 0.75, shape + (2,)), rng.uniform(lo, hi, shape + (2,))], -1)


# ---------------------------------------------------------------------------
# oracle checks

def check_matching(per_size: int = 200, sizes=range(2, 8), seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        mismatches, worst = 0, 0.0
        for n in sizes:
            for _ in range(per_size):
                cost = rng.random((n, n))
                fast, slow = hungarian(cost), brute_force_match(cost)
                if fast.pairs != slow.pairs:
                    mismatches += 1
                worst = max(worst, abs(fast.total_cost - slow.total_cost))
        return float(mismatches) + worst, f"{mismatches} pair mismatches, max cost gap {worst:.2e}"

    return _timed("oracle.matching", 1e-9, run, budget=10.0)


def check_sampling(trials: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        with precision("float64"):
            for _ in range(trials):
                pyr = random_pyramid(rng, c=3, size=64)
                maps = [lv.data[0] for lv in pyr.levels]
                pts = rng.uniform(-0.05, 1.05, (1, 4, 2))
                zs = rng.uniform(1.0, 6.0, (1, 4, 2))
                spec = SamplingSpec(Tensor(pts[..., 0]), Tensor(pts[..., 1]), Tensor(zs[..., 0]),
                                    Tensor(zs[..., 1]))
                got = bidirectional_sample(pyr, spec).data[0]
                for k in range(4):
                    want = naive_bidirectional(maps, pts[0, k, 0], pts[0, k, 1], zs[0, k, 0], zs[0, k, 1])
                    worst = max(worst, float(np.abs(got[k] - want).max()))
                boxes = random_boxes(rng, (1, 3), 0.05, 0.9)
                pooled = roi_align(pyr, Tensor(boxes), 4).data[0]
                levels = fpn_level(boxes, pyr.image_size)[0]
                for k in range(3):
                    want = naive_roi_align(maps[levels[k] - 2], boxes[0, k], 4)
                    worst = max(worst, float(np.abs(pooled[k] - want).max()))
        return worst, f"max abs error {worst:.2e}"

    return _timed("oracle.sampling", 1e-5, run, budget=30.0)


def check_pairwise_cost(trials: int = 50, seed: int = 0) -> CheckResult:
    def naive(logit, box, gt):
        p = 1 / (1 + math.exp(-logit))
        cls = naive_focal(logit, 1) - 0.75 * p ** 2 * -math.log(1 - p)
        xyxy = lambda b: (b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)
        l1 = sum(abs(a - b) for a, b in zip(box, gt))
        return 2.0 * cls + 5.0 * l1 + 2.0 * (1 - naive_giou(xyxy(box), xyxy(gt)))

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            logits = rng.normal(size=4)
            boxes = random_boxes(rng, (4,))
            tgt = L.Target(random_boxes(rng, (3,)), np.zeros(3, dtype=int))
            cost = L.pairwise_cost(logits, boxes, tgt, L.LossWeights())
            for i in range(4):
                for j in range(3):
                    worst = max(worst, abs(cost[i, j] - naive(logits[i], boxes[i], tgt.boxes[j])))
        return worst, f"max abs error {worst:.2e}"

    return _timed("oracle.pairwise_cost", 1e-9, run)


def check_ap_oracle(trials: int = 200, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            n_img = int(rng.integers(1, 3))
            gts, truths, preds, dets = [], [], [], []
            for i in range(n_img):
                m = int(rng.integers(0, 3))
                gb = np.concatenate([rng.uniform(0, 40, (m, 2)), rng.uniform(5, 20, (m, 2))], 1)
                truths.append(ImageTruth(gb, np.ones(m, dtype=int)))
                gts += [(i, tuple(b)) for b in gb]
                k = int(rng.integers(0, 3))
                jitter = gb[rng.integers(0, m, k)] + rng.normal(0, 3, (k, 4)) if m else \
                    np.concatenate([rng.uniform(0, 40, (k, 2)), rng.uniform(5, 20, (k, 2))], 1)
                jitter[:, 2:] = np.abs(jitter[:, 2:]) + 1
                scores = rng.random(k)
                preds.append(ImagePredictions(jitter, scores, np.ones(k, dtype=int)))
                dets += [(s, i, tuple(b)) for s, b in zip(scores, jitter)]
            if not gts:
                continue
            res = evaluate_detections(preds, truths)
            worst = max(worst, abs(res.AP50 - naive_ap(dets, gts, 0.5)),
                        abs(res.AP75 - naive_ap(dets, gts, 0.75)))
        return worst, f"max AP gap {worst:.2e}"

    return _timed("oracle.average_precision", 1e-9, run)


# ---------------------------------------------------------------------------
# gradient checks

def gradcheck_ops(seed: int = 123) -> CheckResult:
    def run():
        worst, where = 0.0, ""
        for name in sorted(OP_CASES):
            with precision("float64"):
                params, fn = OP_CASES[name](np.random.default_rng(seed))
                w = Tensor(np.random.default_rng(7).normal(size=fn().shape))
                err = finite_diff_check(lambda: (fn() * w).sum(), params)
            if err > worst:
                worst, where = err, name
        return worst, f"{len(OP_CASES)} ops, worst {where}"

    return _timed("gradcheck.tensor_ops", GRAD_TOL, run)


def gradcheck_qgfe(seed: int = 5) -> CheckResult:
    def run():
        with precision("float64"):
            rng = np.random.default_rng(seed)
            mod = QGFE(4, 2, rng)
            q, roi = leaf(rng, 2, 4), leaf(rng, 2, 4, 4)
            w = Tensor(rng.normal(size=(2, 4)))
            err = finite_diff_check(lambda: (mod(q, roi) * w).sum(), [q, roi] + mod.parameters(), eps=1e-6)
        return err, ""

    return _timed("gradcheck.qgfe", GRAD_TOL, run)


def gradcheck_adaptive_mixing(seed: int = 7) -> CheckResult:
    def run():
        with precision("float64"):
            rng = np.random.default_rng(seed)
            am = AdaptiveMixing(4, 3, rng)
            q, s = leaf(rng, 2, 4), leaf(rng, 2, 3, 4)
            w = Tensor(rng.normal(size=(2, 4)))
            err = finite_diff_check(lambda: (am(q, s) * w).sum(), [q, s] + am.parameters(), eps=1e-6)
        return err, ""

    return _timed("gradcheck.adaptive_mixing", GRAD_TOL, run)


def _loss_fixture(rng, bsz=2, n=6, k=3):
    def make(kk):
        return L.StageOutput(leaf(rng, bsz, n, kk), Tensor(random_boxes(rng, (bsz, n)), requires_grad=True),
                             Tensor(random_boxes(rng, (bsz, n)), requires_grad=True), leaf(rng, bsz, n, kk))

    targets = [L.Target(random_boxes(rng, (m,)), rng.integers(0, k, m)) for m in (2, 3)]
    return make(1), make(k), targets


def gradcheck_total_loss(seed: int = 5) -> CheckResult:
    def run():
        with precision("float64"):
            g, loc, targets = _loss_fixture(np.random.default_rng(seed))
            params = [g.boxes, loc.boxes, g.aux_boxes, loc.aux_boxes]
            err = finite_diff_check(lambda: L.total_loss(g, loc, targets, L.LossWeights()).total, params,
                                    eps=1e-6)
        return err, "w.r.t. predicted boxes"

    return _timed("gradcheck.total_loss", GRAD_TOL, run)


# ---------------------------------------------------------------------------
# invariant checks

def check_level_weights(samples: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        z = rng.uniform(0, 7, (samples, 2))
        with precision("float64"):
            w = level_weights(Tensor(z[:, 0]), Tensor(z[:, 1])).data
        sum_gap = float(np.abs(w.sum(axis=1) - 2).max())
        example = level_weights(Tensor(2.0), Tensor(2.0)).data
        example_gap = float(np.abs(example - [1.1408, 0.6920, 0.1544, 0.0127]).max())
        oracle_gap = float(np.abs(np.array(naive_level_weights(2.0, 2.0)) - example).max())
        ok = sum_gap <= 1e-6 and example_gap <= 1e-3 and oracle_gap <= 1e-6
        return (0.0 if ok else 1.0), f"sum gap {sum_gap:.1e}, worked example gap {example_gap:.1e}"

    return _timed("invariant.level_weights", 0.0, run)


def check_mff_shape() -> CheckResult:
    def run():
        rng = np.random.default_rng(0)
        pyr = FeaturePyramid([Tensor(rng.normal(size=(1, 8, 64 // s, 96 // s))) for s in (4, 8, 16, 32)])
        width = mff_gather(pyr).shape[-1]
        out = MultiScaleFusion(16, rng)(pyr).shape
        ok = width == 85 and out == (1, 2, 3, 8, 16)
        return (0.0 if ok else 1.0), f"gather width {width}, output {out[1:]}"

    return _timed("invariant.mff_shape", 0.0, run)


def check_qgfe_shapes() -> CheckResult:
    def run():
        bad = []
        for s, c in ((3, 8), (5, 16), (7, 64)):
            trace = []
            out = QGFE(c, s, np.random.default_rng(0))(Tensor(np.ones((1, c))), Tensor(np.ones((1, s * s, c))),
                                                      trace)
            if trace != [(s * s, s * s), (c, s * s)] or out.shape != (1, c):
                bad.append((s, c))
        return float(len(bad)), f"failing (S, C): {bad}" if bad else "3 shape traces"

    return _timed("invariant.qgfe_shapes", 0.0, run)


def check_loss_hand_cases() -> CheckResult:
    def run():
        gaps = {}
        gaps["giou"] = abs(giou(xyxy_to_cxcywh([0, 0, 2, 2]), xyxy_to_cxcywh([1, 1, 3, 3])) + 5 / 63)
        with precision("float64"):
            gaps["focal"] = abs(L.focal_loss(0.0, 1).item() - 0.25 * 0.25 * math.log(2))
            logits = np.array([[[0.8, -0.4, 0.1], [-1.5, 0.3, -0.2]]])
            boxes = np.array([[[0.5, 0.4, 0.3, 0.2], [0.2, 0.7, 0.1, 0.1]]])
            tgt = L.Target(np.array([[0.45, 0.42, 0.28, 0.25]]), np.array([2]))
            asg = [hungarian(L.pairwise_cost(logits[0], boxes[0], tgt, L.LossWeights()))]
            out = L.stage_loss(L.StageOutput(Tensor(logits), Tensor(boxes)), [tgt], asg)
        cls = sum(naive_focal(logits[0, i, k], int(i == 0 and k == 2)) for i in range(2) for k in range(3))
        l1 = sum(abs(a - b) for a, b in zip(boxes[0, 0], tgt.boxes[0]))
        xyxy = lambda b: (b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)
        lg = 1 - naive_giou(xyxy(boxes[0, 0]), xyxy(tgt.boxes[0]))
        gaps["stage_loss"] = max(abs(out["cls"].item() - cls), abs(out["l1"].item() - l1),
                                 abs(out["giou"].item() - lg))
        return max(gaps.values()), ", ".join(f"{k} {v:.1e}" for k, v in gaps.items())

    return _timed("invariant.loss_hand_cases", 1e-6, run)


def check_eval_ordering(trials: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        violations = 0
        for _ in range(trials):
            m = int(rng.integers(1, 4))
            gb = np.concatenate([rng.uniform(0, 40, (m, 2)), rng.uniform(5, 20, (m, 2))], 1)
            k = int(rng.integers(0, 6))
            pb = gb[rng.integers(0, m, k)] + rng.normal(0, 2, (k, 4))
            pb[:, 2:] = np.abs(pb[:, 2:]) + 1
            res = evaluate_detections([ImagePredictions(pb, rng.random(k), rng.integers(1, 3, k))],
                                      [ImageTruth(gb, rng.integers(1, 3, m))])
            if not (0 <= res.AP <= res.AP50 <= 1 and res.AP75 <= res.AP50):
                violations += 1
        return float(violations), f"{violations} ordering violations"

    return _timed("invariant.eval_ordering", 0.0, run)


SUITES = {
    "oracle": (check_matching, check_sampling, check_pairwise_cost, check_ap_oracle),
    "gradcheck": (gradcheck_ops, gradcheck_qgfe, gradcheck_adaptive_mixing, gradcheck_total_loss),
    "invariants": (check_level_weights, check_mff_shape, check_qgfe_shapes, check_loss_hand_cases,
                   check_eval_ordering),
}
SUITES["all"] = SUITES["oracle"] + SUITES["gradcheck"] + SUITES["invariants"]

GRADCHECK_MODULES = {
    "tensor": gradcheck_ops,
    "qgfe": gradcheck_qgfe,
    "adaptive_mixing": gradcheck_adaptive_mixing,
    "loss": gradcheck_total_loss,
}


def report(results) -> dict:
    results = list(results)
    return {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}


def run_checks(suite: str = "all") -> dict:
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    out = report(check() for check in SUITES[suite])
    out["suite"] = suite
    return out


def run_gradcheck(module: str = "all") -> dict:
    if module != "all" and module not in GRADCHECK_MODULES:
        raise KeyError(f"unknown module {module!r}; choose from {sorted(GRADCHECK_MODULES)} or 'all'")
    chosen = GRADCHECK_MODULES.values() if module == "all" else [GRADCHECK_MODULES[module]]
    out = report(check() for check in chosen)
    out["module"] = module
    return out
