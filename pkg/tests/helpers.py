"""Shared fixtures for gradient checks and brute-force oracles."""

from __future__ import annotations

import math

import numpy as np

from asca import model as M
from asca import tensor as T
from asca.tensor import Tensor


def leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64)


def probe(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar sum(out * R) for a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return T.tsum(T.mul(out, Tensor(r, dtype=np.float64)))


def randomize(w: M.ModelWeights, rng, scale=0.3):
    """Replace zero-initialised branches so every parameter carries gradient."""
    for k, p in w.params.items():
        if k.endswith(".gamma"):
            p.data[...] = 1.0 + rng.uniform(-0.2, 0.2, p.shape)
        else:
            p.data[...] = rng.uniform(-scale, scale, p.shape)


def micro_model(arch="C-C-C-T", seed=0):
    spec = M.parse_arch_spec(arch, "micro", num_classes=3, window=7)
    with T.precision(np.float64):
        w = M.init_weights(spec, seed)
    randomize(w, np.random.default_rng(seed + 1))
    return spec, w


def _bn_state(c, rng):
    return T.BatchNormState(rng.uniform(-0.5, 0.5, c), rng.uniform(0.5, 1.5, c))


def op_cases():
    """name -> (fn, inputs) pairs covering every differentiable op."""
    rng = np.random.default_rng(1234)
    cases = {}

    def case(name, inputs, fn):
        cases[name] = (fn, inputs)

    a, b = leaf(rng, (3, 4)), leaf(rng, (3, 4))
    case("add", [a, b], lambda: probe(T.add(a, b)))
    a2, b2 = leaf(rng, (2, 3, 4, 4)), leaf(rng, (1, 3, 1, 1))
    case("add_per_channel", [a2, b2], lambda: probe(T.add(a2, b2)))
    a3, b3 = leaf(rng, (3, 4)), leaf(rng, (3, 4))
    case("sub", [a3, b3], lambda: probe(T.sub(a3, b3)))
    a4, b4 = leaf(rng, (2, 3, 4, 4)), leaf(rng, (2, 3, 1, 1))
    case("mul_broadcast", [a4, b4], lambda: probe(T.mul(a4, b4)))
    a5 = leaf(rng, (5,))
    case("scale", [a5], lambda: probe(T.mul(a5, -2.5)))
    a6 = leaf(rng, (6,))
    case("exp", [a6], lambda: probe(T.exp(a6)))
    a7 = leaf(rng, (6,), 0.5, 2.0)
    case("log", [a7], lambda: probe(T.log(a7)))
    a8 = leaf(rng, (2, 3, 4))
    case("reshape", [a8], lambda: probe(T.reshape(a8, (6, 4))))
    case("transpose", [a8], lambda: probe(T.transpose(a8, (2, 0, 1))))
    case("getitem", [a8], lambda: probe(T.getitem(a8, (slice(None), slice(1, 3), slice(0, 2)))))
    a9 = leaf(rng, (1, 2, 3, 3))
    case("pad2d", [a9], lambda: probe(T.pad2d(a9, ((0, 2), (1, 1)))))
    tab = leaf(rng, (2, 9))
    idx = M.relative_position_index(2)
    case("take", [tab], lambda: probe(T.take(tab, idx)))
    s1 = leaf(rng, (2, 3, 4))
    case("sum_axis", [s1], lambda: probe(T.tsum(s1, axis=(0, 2))))
    case("mean_keepdims", [s1], lambda: probe(T.mean(s1, axis=1, keepdims=True)))
    m1, m2 = leaf(rng, (3, 4)), leaf(rng, (4, 5))
    case("matmul", [m1, m2], lambda: probe(T.matmul(m1, m2)))
    m3, m4 = leaf(rng, (2, 3, 3, 4)), leaf(rng, (2, 3, 4, 2))
    case("matmul_batched", [m3, m4], lambda: probe(T.matmul(m3, m4)))
    m5, m6, m7 = leaf(rng, (2, 5, 4)), leaf(rng, (4, 3)), leaf(rng, (3,))
    case("linear", [m5, m6, m7], lambda: probe(T.linear(m5, m6, m7)))
    x1, w1 = leaf(rng, (2, 3, 6, 6)), leaf(rng, (4, 3, 3, 3))
    case("conv2d", [x1, w1], lambda: probe(T.conv2d(x1, w1, stride=1, pad=1)))
    x2, w2 = leaf(rng, (2, 3, 6, 6)), leaf(rng, (4, 3, 3, 3))
    case("conv2d_stride2_same", [x2, w2], lambda: probe(T.conv2d(x2, w2, stride=2, pad="same")))
    x3, w3 = leaf(rng, (2, 4, 5, 5)), leaf(rng, (4, 1, 3, 3))
    case("conv2d_depthwise", [x3, w3], lambda: probe(T.conv2d(x3, w3, stride=2, pad="same", groups=4)))
    x4, w4 = leaf(rng, (2, 4, 4, 4)), leaf(rng, (6, 2, 3, 3))
    case("conv2d_grouped", [x4, w4], lambda: probe(T.conv2d(x4, w4, pad=1, groups=2)))
    x5, w5 = leaf(rng, (2, 3, 4, 4)), leaf(rng, (5, 3, 1, 1))
    case("conv2d_1x1", [x5, w5], lambda: probe(T.conv2d(x5, w5)))
    p1 = leaf(rng, (2, 3, 4, 4))
    case("avg_pool2x2", [p1], lambda: probe(T.avg_pool2x2(p1)))
    p2 = leaf(rng, (2, 3, 5, 3))
    case("avg_pool2x2_odd", [p2], lambda: probe(T.avg_pool2x2(p2)))
    bx, bg, bb = leaf(rng, (4, 3, 3, 3)), leaf(rng, (3,), 0.5, 1.5), leaf(rng, (3,))
    case("batch_norm_train", [bx, bg, bb],
         lambda: probe(T.batch_norm(bx, bg, bb, _bn_state(3, np.random.default_rng(0)), train=True)))
    st = _bn_state(3, rng)
    case("batch_norm_eval", [bx, bg, bb], lambda: probe(T.batch_norm(bx, bg, bb, st, train=False)))
    g1 = leaf(rng, (3, 5), -3, 3)
    case("gelu", [g1], lambda: probe(T.gelu(g1)))
    case("sigmoid", [g1], lambda: probe(T.sigmoid(g1)))
    r1 = Tensor(np.where(rng.random((3, 5)) < 0.5, -1, 1) * rng.uniform(0.1, 1, (3, 5)),
                requires_grad=True, dtype=np.float64)
    case("relu", [r1], lambda: probe(T.relu(r1)))
    sm = leaf(rng, (2, 3, 5), -2, 2)
    case("softmax", [sm], lambda: probe(T.softmax(sm, axis=-1)))
    case("softmax_axis1", [sm], lambda: probe(T.softmax(sm, axis=1)))
    z = leaf(rng, (4, 3), -3, 3)
    tgt = rng.uniform(0, 1, (4, 3))
    case("bce_with_logits", [z], lambda: T.bce_with_logits(z, tgt))
    return cases


def block_cases():
    """Composite model blocks in float64 with randomized weights."""
    cases = {}
    spec, w = micro_model("C-C-T-T")
    rng = np.random.default_rng(7)
    pick = lambda prefix: [p for k, p in w.params.items() if k.startswith(prefix)]

    x = leaf(rng, (3, 16, 4, 4))
    cases["squeeze_excitation"] = (lambda: probe(M.squeeze_excitation(x, w, "s1.b0.se")),
                                   [x] + pick("s1.b0.se"))
    xc = leaf(rng, (3, 4, 6, 6))
    cases["mbconv_stride2"] = (lambda: probe(M.mbconv_block(xc, w, "s1.b0", stride=2, train=True)),
                               [xc] + pick("s1.b0"))
    xs1 = leaf(rng, (3, 4, 4, 4))
    cases["mbconv_stride1"] = (lambda: probe(M.mbconv_block(xs1, w, "s2.b0", stride=1, train=True)),
                               [xs1] + pick("s2.b0"))
    xa = leaf(rng, (2, 8, 4, 4))
    attn = [p for k, p in w.params.items() if k.startswith("s3.b0.attn") and not k.endswith("rel_bias")]
    # window 2 tiles the 4x4 map; window 3 forces padding to 6x6 and a crop
    for window in (2, 3):
        wa = _attn_weights(w, window)
        cases[f"relative_window_attention_w{window}"] = (
            (lambda wa=wa, window=window:
             probe(M.relative_window_attention(xa, wa, "s3.b0.attn", window, 2, train=True))),
            [xa, wa["s3.b0.attn.rel_bias"]] + attn)
    cases["mlp_block"] = (lambda: probe(M.mlp_block(xa, w, "s3.b0.mlp", train=True)), [xa] + pick("s3.b0.mlp"))
    xr, xi = leaf(rng, (3, 2, 2, 2)), leaf(rng, (3, 2, 2, 2))
    cases["stochastic_depth_train"] = (
        lambda: probe(M.stochastic_depth(xr, xi, 0.3, True, np.random.default_rng(5))), [xr, xi])
    return cases


def _attn_weights(w: M.ModelWeights, window: int) -> M.ModelWeights:
    """Copy of ``w`` whose s3.b0 relative table is sized for ``window``."""
    rng = np.random.default_rng(window)
    table = Tensor(rng.uniform(-0.5, 0.5, (2, (2 * window - 1) ** 2)), requires_grad=True, dtype=np.float64)
    params = dict(w.params)
    params["s3.b0.attn.rel_bias"] = table
    return M.ModelWeights(params, w.bn)


def model_case(arch="C-C-C-T"):
    spec, w = micro_model(arch)
    rng = np.random.default_rng(3)
    x = leaf(rng, (3, 1, 16, 16))
    y = (rng.random((3, spec.num_classes)) < 0.5).astype(np.float64)

    def fn():
        return T.bce_with_logits(M.model_forward(x, spec, w, train=True), y)

    return fn, [x] + list(w.params.values())


# ---------------------------------------------------------------------------
# brute-force oracles


def conv2d_loops(x, w, stride=1, pad=0):
    """Nested-loop cross-correlation, groups=1, symmetric padding."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def ap_bruteforce(scores, labels):
    """Precision at every positive's rank, ranks from an explicit comparison count."""
    n = len(scores)
    pos = [i for i in range(n) if labels[i]]

    def rank(i):
        # items ahead of i: higher score, or equal score and lower index
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    terms = []
    for i in pos:
        r = rank(i)
        terms.append(sum(1 for j in pos if rank(j) <= r) / r)
    return math.fsum(terms) / len(pos)


def mel_filterbank_loops(sr, n_fft, n_mels, fmin, fmax):
    """Per-bin triangle formula, written independently of the vectorized path."""
    import math

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo_m, hi_m = mel(fmin), mel(fmax)
    pts = [hz(lo_m + (hi_m - lo_m) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sr / n_fft
            if left < f <= center:
                fb[m, k] = (f - left) / (center - left)
            elif center < f < right:
                fb[m, k] = (right - f) / (right - center)
    return fb


def translation_identity_holds(index_map, window):
    """index_map[p][q] == index_map[p+t][q+t] for every in-window translation t."""
    ys, xs = np.divmod(np.arange(window * window), window)
    py, qy = ys[:, None], ys[None, :]
    px, qx = xs[:, None], xs[None, :]
    for ty in range(-window + 1, window):
        for tx in range(-window + 1, window):
            ok = ((py + ty >= 0) & (py + ty < window) & (qy + ty >= 0) & (qy + ty < window)
                  & (px + tx >= 0) & (px + tx < window) & (qx + tx >= 0) & (qx + tx < window))
            p2 = np.where(ok, (py + ty) * window + px + tx, 0)
            q2 = np.where(ok, (qy + ty) * window + qx + tx, 0)
            if not np.array_equal(index_map[p2, q2][ok], np.broadcast_to(index_map, ok.shape)[ok]):
                return False
    return True


def _t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def attention_reference(x, params, window, heads, bias):
    """Loop-per-window numpy attention, written from the definition."""
    B, C, H, W = x.shape
    ph, pw = -H % window, -W % window
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    out = np.zeros_like(xp)
    d = C // heads
    idx = M.relative_position_index(window)
    for b in range(B):
        for wy in range(0, H + ph, window):
            for wx in range(0, W + pw, window):
                tok = xp[b, :, wy:wy + window, wx:wx + window].reshape(C, -1).T
                q, k, v = (tok @ params[n + ".weight"] + params[n + ".bias"] for n in "qkv")
                res = np.zeros_like(tok)
                for h in range(heads):
                    s = slice(h * d, (h + 1) * d)
                    logits = q[:, s] @ k[:, s].T / np.sqrt(d)
                    if bias is not None:
                        logits = logits + bias[h][idx]
                    a = np.exp(logits - logits.max(axis=1, keepdims=True))
                    a /= a.sum(axis=1, keepdims=True)
                    res[:, s] = a @ v[:, s]
                res = res @ params["proj.weight"] + params["proj.bias"]
                out[b, :, wy:wy + window, wx:wx + window] = res.T.reshape(C, window, window)
    return out[:, :, :H, :W]


def attn_weights(c, heads, window, seed=0, zero_table=False):
    rng = np.random.default_rng(seed)
    w = M.ModelWeights()
    for n in ("q", "k", "v", "proj"):
        w.params[f"a.{n}.weight"] = _t64(rng.uniform(-0.5, 0.5, (c, c)))
        w.params[f"a.{n}.bias"] = _t64(rng.uniform(-0.5, 0.5, c))
    table = np.zeros((heads, (2 * window - 1) ** 2)) if zero_table else rng.uniform(-1, 1, (heads, (2 * window - 1) ** 2))
    w.params["a.rel_bias"] = _t64(table)
    return w
