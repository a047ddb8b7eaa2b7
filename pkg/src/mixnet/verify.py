"""Self-verification suites: gradients, wiring, embedding, metrics,
optimizer arithmetic and augmentation counts.

Each check returns a CheckResult; ``run_all`` collects every suite.
The command line ``verify`` subcommand prints one line per check and
fails the process if any check fails, so a build can be validated on a
machine with nothing but the package installed.

The metric checks compare the library against straight-line reference
implementations written here with plain loops.  They repeat, on
purpose, logic that exists in optimized form in :mod:`mixnet.metrics`;
the duplication is the point, the two paths must agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, ops
from .arch import NetConfig, Network, embed_v3_into_v1
from .augment import expand_slices, policy_ops, rotate_slice
from .autodiff import Node, backward, grad_check
from .errors import VerificationFailure
from .tensor import Tensor
from .trainer import LR_BOUNDARIES, Optimizer, lr_at

GRAD_TOL = 1e-4
EMBED_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _result(name, passed, detail=""):
    return CheckResult(name, bool(passed), detail)


# ---------------------------------------------------------------------------
# gradients


def _op_builders(rng):
    """(name, build fn, input arrays) for every differentiable op."""
    x = rng.normal(size=(1, 5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=(3,))
    w5 = rng.normal(size=(5, 5, 2, 2))
    logits = rng.normal(size=(1, 4, 4, 3))
    labels = rng.integers(0, 3, size=(1, 4, 4))
    pair = rng.normal(size=(1, 4, 4, 2))

    return [
        ("conv2d", lambda lv: ops.reduce_sum(ops.conv2d(lv[0], lv[1], lv[2])),
         [x, w, b]),
        ("conv2d_dilated", lambda lv: ops.reduce_sum(
            ops.conv2d(lv[0], lv[1], lv[2], dilation=2)), [x, w, b]),
        ("conv2d_5x5", lambda lv: ops.reduce_sum(ops.conv2d(lv[0], lv[1])),
         [x, w5]),
        ("maxpool2x2", lambda lv: ops.reduce_sum(ops.maxpool2x2(lv[0])), [x]),
        ("avgpool2x2", lambda lv: ops.reduce_sum(ops.avgpool2x2(lv[0])), [x]),
        ("avgpool_region", lambda lv: ops.reduce_sum(ops.avgpool_region(lv[0], 3)),
         [x]),
        ("bilinear_up", lambda lv: ops.reduce_sum(ops.bilinear_resize(lv[0], 9, 11)),
         [x]),
        ("bilinear_down", lambda lv: ops.reduce_sum(ops.bilinear_resize(lv[0], 3, 2)),
         [x]),
        ("relu", lambda lv: ops.reduce_sum(ops.relu(lv[0])), [x]),
        ("add_mul", lambda lv: ops.reduce_sum(ops.mul(ops.add(lv[0], lv[1]), lv[0])),
         [pair, pair + 0.5]),
        ("concat", lambda lv: ops.reduce_sum(ops.relu(ops.concat_channels(lv))),
         [pair, pair * 2]),
        ("xent_sum", lambda lv: ops.softmax_cross_entropy(lv[0], labels, "sum"),
         [logits]),
        ("xent_mean", lambda lv: ops.softmax_cross_entropy(lv[0], labels, "mean"),
         [logits]),
    ]


def check_op_gradients(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, build, arrays in _op_builders(rng):
        report = grad_check(build, arrays, tolerance=GRAD_TOL)
        results.append(_result(
            f"grad/{name}", report.passed,
            f"max rel err {report.max_rel_error:.2e} over "
            f"{report.coords_checked} coords (tol {GRAD_TOL:.0e})"))
    return results


def check_network_gradients(seed: int = 0, coords_per_param: int = 4) -> list:
    """Finite differences through a real (tiny) network, parameter side.

    Parameters are jittered away from their initial values first.  Freshly
    built nets hold exact-zero biases, and relu zeros propagated through
    1x1 convolutions put pre-activations exactly on the relu kink, where
    a finite difference straddles the corner and disagrees with the
    (one-sided) analytic subgradient no matter how small the step is.
    At a generic point that set has measure zero.  Coordinates that still
    land near a kink are rechecked with smaller steps: a kink artifact
    vanishes as the step shrinks below the kink distance, a real gradient
    bug stays.
    """
    cfg = NetConfig(variant="v3", modalities=2, classes=3, filters=4,
                    init_pool=False)
    net = Network(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for _, p in net.store.items():
        jittered = p.value.data.astype(np.float64)
        jittered += rng.normal(scale=0.05, size=jittered.shape)
        p.value = Tensor(jittered)
    x = rng.normal(size=(1, 12, 12, 2))
    labels = rng.integers(0, 3, size=(1, 12, 12))

    def loss_value() -> float:
        return float(ops.softmax_cross_entropy(net.forward(x), labels, "sum").data)

    net.zero_grad()
    backward(ops.softmax_cross_entropy(net.forward(x), labels, "sum"))

    def rel_err_at(flat, analytic, i, step) -> float:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_value()
        flat[i] = orig - step
        f_minus = loss_value()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)

    worst = 0.0
    checked = 0
    for name, p in net.store.items():
        flat = p.value.data.reshape(-1)
        grad = p.grad.reshape(-1)
        take = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=take, replace=False):
            err = rel_err_at(flat, grad[i], i, 1e-3)
            for retry_step in (1e-5, 3e-7):
                if err <= GRAD_TOL:
                    break
                err = min(err, rel_err_at(flat, grad[i], i, retry_step))
            worst = max(worst, err)
            checked += 1
    return [_result("grad/network_params", worst <= GRAD_TOL,
                    f"max rel err {worst:.2e} over {checked} sampled "
                    f"parameter coords (tol {GRAD_TOL:.0e})")]


# ---------------------------------------------------------------------------
# structure


def _reference_shapes(variant: str) -> dict:
    t, fil, mid, m = 72, 24, 12, 3
    shapes = {}
    if variant == "v1":
        shapes["init.conv.w"] = (5, 5, m, t)
        shapes["init.conv.b"] = (t,)
        for i in range(1, 6):
            shapes[f"level{i}.reduce.w"] = (1, 1, t, 36)
            shapes[f"level{i}.reduce.b"] = (36,)
            shapes[f"level{i}.dilated.w"] = (3, 3, 36, 36)
            shapes[f"level{i}.dilated.b"] = (36,)
            shapes[f"level{i}.expand.w"] = (1, 1, 36, t)
            shapes[f"level{i}.expand.b"] = (t,)
        agg = 5 * t
    elif variant == "v2":
        for s in range(m):
            shapes[f"init.s{s}.conv.w"] = (5, 5, 1, fil)
            shapes[f"init.s{s}.conv.b"] = (fil,)
        for i in (1, 3, 5):
            for part, shp in (("reduce", (1, 1, t, mid)),
                              ("dilated", (3, 3, mid, mid)),
                              ("expand", (1, 1, mid, fil)),
                              ("shortcut", (1, 1, t, fil))):
                shapes[f"level{i}.{part}.w"] = shp
                shapes[f"level{i}.{part}.b"] = (shp[-1],)
        for i in (2, 4):
            for s in range(m):
                for part, shp in (("reduce", (1, 1, 2 * fil, mid)),
                                  ("dilated", (3, 3, mid, mid)),
                                  ("expand", (1, 1, mid, fil)),
                                  ("shortcut", (1, 1, 2 * fil, fil))):
                    shapes[f"level{i}.s{s}.{part}.w"] = shp
                    shapes[f"level{i}.s{s}.{part}.b"] = (shp[-1],)
        agg = 9 * fil
    else:
        for s in range(m):
            shapes[f"init.s{s}.conv.w"] = (5, 5, 1, fil)
            shapes[f"init.s{s}.conv.b"] = (fil,)
            for i in range(1, 6):
                shapes[f"level{i}.s{s}.reduce.w"] = (1, 1, fil, mid)
                shapes[f"level{i}.s{s}.reduce.b"] = (mid,)
                shapes[f"level{i}.s{s}.dilated.w"] = (3, 3, mid, mid)
                shapes[f"level{i}.s{s}.dilated.b"] = (mid,)
                shapes[f"level{i}.s{s}.expand.w"] = (1, 1, mid, fil)
                shapes[f"level{i}.s{s}.expand.b"] = (fil,)
        agg = 15 * fil
    shapes["out.final.w"] = (3, 3, 5 * agg, 4)
    shapes["out.final.b"] = (4,)
    return shapes


def check_structure() -> list:
    results = []
    dilations = (2, 1, 4, 1, 8)
    for variant in ("v1", "v2", "v3"):
        net = Network(NetConfig(variant=variant), seed=0)
        want = _reference_shapes(variant)
        got = {k: v.shape for k, v in net.store.items()}
        ok = got == want
        detail = f"{len(got)} parameter tensors, {net.param_count} weights"
        if not ok:
            missing = set(want) - set(got)
            extra = set(got) - set(want)
            wrong = {k for k in set(got) & set(want) if got[k] != want[k]}
            detail = f"missing={sorted(missing)[:3]} extra={sorted(extra)[:3]} " \
                     f"wrong={sorted(wrong)[:3]}"
        results.append(_result(f"structure/{variant}/parameters", ok, detail))

        rows = {u.name: u for u in net.units}
        if variant == "v1":
            level_ok = all(
                (rows[f"level{i}"].c_in, rows[f"level{i}"].filters,
                 rows[f"level{i}"].dilation, rows[f"level{i}"].c_out)
                == (72, 72, d, 72) for i, d in enumerate(dilations, 1))
        elif variant == "v2":
            level_ok = all(
                (rows[f"level{i}"].c_in, rows[f"level{i}"].dilation) == (72, d)
                for i, d in ((1, 2), (3, 4), (5, 8)))
            level_ok &= all(rows[f"level{i}.s{s}"].c_in == 48
                            for i in (2, 4) for s in range(3))
        else:
            level_ok = all(
                (rows[f"level{i}.s{s}"].c_in, rows[f"level{i}.s{s}"].dilation)
                == (24, d)
                for i, d in enumerate(dilations, 1) for s in range(3))
        results.append(_result(f"structure/{variant}/levels", level_ok,
                               "per-level widths and dilations"))

        x = np.zeros((1, 26, 30, 3), np.float32)
        out_shape = net.forward(x).shape
        results.append(_result(f"structure/{variant}/logits", out_shape == (1, 26, 30, 4),
                               f"logits {out_shape} for input (1, 26, 30, 3)"))
    return results


def check_embedding(seed: int = 0, tol: float = EMBED_TOL, probes: int = 3) -> list:
    v3 = Network(NetConfig(variant="v3", classes=4, filters=8), seed=seed)
    v1 = embed_v3_into_v1(v3)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = rng.normal(size=(1, 24, 24, 3)).astype(np.float32)
        diff = np.abs(v1.forward(x).data - v3.forward(x).data).max()
        worst = max(worst, float(diff))
    return [_result("embedding/v3_in_v1", worst <= tol,
                    f"max logit diff {worst:.2e} over {probes} probes (tol {tol:.0e})")]


# ---------------------------------------------------------------------------
# metrics (inline plain-loop references)


def _dice_ref(a, b):
    inter = 0
    na = nb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        na += bool(x)
        nb += bool(y)
        inter += bool(x) and bool(y)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def _vs_ref(a, b):
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def _surface_ref(mask):
    pts = []
    dims = mask.shape
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                if not mask[i, j, k]:
                    continue
                edge = False
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    ni, nj, nk = i + di, j + dj, k + dk
                    if not (0 <= ni < dims[0] and 0 <= nj < dims[1]
                            and 0 <= nk < dims[2]) or not mask[ni, nj, nk]:
                        edge = True
                        break
                if edge:
                    pts.append((i, j, k))
    return np.array(pts, dtype=np.int64).reshape(-1, 3)


def _hd95_ref(a, b, spacing):
    sa = _surface_ref(a)
    sb = _surface_ref(b)
    if sa.shape[0] == 0 or sb.shape[0] == 0:
        return None
    sp = np.asarray(spacing, dtype=np.float64)

    def directed(src, dst):
        out = np.empty(src.shape[0])
        for i in range(src.shape[0]):
            d = (dst - src[i]) * sp
            out[i] = np.sqrt((d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2).min())
        out.sort()
        return out[max(int(np.ceil(0.95 * out.size)) - 1, 0)]

    return max(directed(sa, sb), directed(sb, sa))


def check_metrics(trials: int = 100, max_dim: int = 12, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    mismatches = []
    defined = 0
    for t in range(trials):
        dims = tuple(rng.integers(3, max_dim + 1, size=3))
        a = rng.random(size=dims) < rng.uniform(0.05, 0.5)
        b = rng.random(size=dims) < rng.uniform(0.05, 0.5)
        spacing = tuple(rng.uniform(0.5, 3.0, size=3))
        if metrics.dice_binary(a, b) != _dice_ref(a, b):
            mismatches.append(f"dice@{t}")
        if metrics.volumetric_similarity(a, b) != _vs_ref(a, b):
            mismatches.append(f"vs@{t}")
        got = metrics.hd95(a, b, spacing)
        want = _hd95_ref(a, b, spacing)
        if want is None:
            if got is not None:
                mismatches.append(f"hd95-defined@{t}")
        else:
            defined += 1
            if got != want:
                mismatches.append(f"hd95@{t}")
    passed = not mismatches and defined >= trials // 2
    return [_result("metrics/oracle_agreement", passed,
                    f"{trials} trials, {defined} with defined hd95, "
                    f"mismatches: {mismatches[:5] if mismatches else 'none'}")]


# ---------------------------------------------------------------------------
# optimizer arithmetic


def check_optimizer() -> list:
    results = []
    # 20-epoch table: halvings at epochs 4, 8, 12, 15, 16, 17, 18, 19
    table = [1, 1, 1, 1, .5, .5, .5, .5, .25, .25, .25, .25,
             .125, .125, .125, 1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256]
    lr_ok = all(lr_at(1.0, e, 20) == f for e, f in enumerate(table))
    results.append(_result("optim/lr_table", lr_ok,
                           f"20-epoch schedule, boundaries {LR_BOUNDARIES}"))

    p = Node.leaf(Tensor(np.array(1.5, dtype=np.float64)), requires_grad=True)
    opt = Optimizer({"p": p}, lr0=0.05, momentum=0.9, weight_decay=0.01)
    grads = [0.3, -0.7, 0.1]
    got = []
    for g in grads:
        p.grad = np.array(g, dtype=np.float64)
        opt.step()
        got.append(float(p.value.data))
    # plain-python reference trace of the same rule
    pv, vv = 1.5, 0.0
    want = []
    for g in grads:
        gp = g + 0.01 * pv
        vv = 0.9 * vv - 0.05 * gp
        pv = pv + 0.9 * vv - 0.05 * gp
        want.append(pv)
    worst = max(abs(a - b) for a, b in zip(got, want))
    results.append(_result("optim/nesterov_trace", worst <= 1e-12,
                           f"3-step float64 trace, max abs err {worst:.2e}"))
    return results


# ---------------------------------------------------------------------------
# augmentation


def check_augmentation(seed: int = 0) -> list:
    results = []
    full = policy_ops("full")
    light = policy_ops("light")
    results.append(_result("augment/policy_sizes",
                           len(full) == 15 and len(light) == 3,
                           f"full={len(full)} light={len(light)}"))
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(2, 16, 16, 2)).astype(np.float32)
    labels = rng.integers(0, 3, size=(2, 16, 16)).astype(np.uint8)
    img15, lab15 = expand_slices(images, labels, "full", seed=seed)
    img3, _ = expand_slices(images, labels, "light", seed=seed)
    counts_ok = img15.shape[0] == 30 and img3.shape[0] == 6
    originals_ok = all(np.array_equal(img15[i * 15], images[i]) and
                       np.array_equal(lab15[i * 15], labels[i])
                       for i in range(2))
    results.append(_result("augment/expansion_counts", counts_ok,
                           f"full 2->{img15.shape[0]}, light 2->{img3.shape[0]}"))
    results.append(_result("augment/originals_preserved", originals_ok,
                           "block leaders equal their source slices"))
    r, rl = rotate_slice(images[0], labels[0], 90)
    rot_ok = np.array_equal(r[:, :, 0], np.rot90(images[0][:, :, 0])) and \
        np.array_equal(rl, np.rot90(labels[0]))
    results.append(_result("augment/rotation_exactness", rot_ok,
                           "90 degree rotation is a pixel permutation"))
    return results


# ---------------------------------------------------------------------------


def run_all(trials: int = 100, seed: int = 0) -> list:
    results = []
    results += check_op_gradients(seed)
    results += check_network_gradients(seed)
    results += check_structure()
    results += check_embedding(seed)
    results += check_metrics(trials=trials, seed=seed)
    results += check_optimizer()
    results += check_augmentation(seed)
    return results


def format_results(results) -> str:
    lines = [r.line() for r in results]
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)


def require_all(results) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationFailure(
            f"{len(failed)} verification checks failed: "
            + ", ".join(r.name for r in failed[:5]))
