"""Superpixel Kernel SHAP, an exact Shapley oracle, and GradCAM.

``predict_fn`` arguments are batch functions: they take an (n, C, H, W)
array and return (n, K) class probabilities.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.ndimage import map_coordinates

from . import nn

log = logging.getLogger(__name__)


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SuperpixelGrid:
    height: int
    width: int
    cell_h: int
    cell_w: int

    @property
    def gh(self) -> int:
        return self.height // self.cell_h

    @property
    def gw(self) -> int:
        return self.width // self.cell_w

    @property
    def M(self) -> int:
        return self.gh * self.gw

    @property
    def cell_area(self) -> int:
        return self.cell_h * self.cell_w

    def labels(self) -> np.ndarray:
        """(H, W) raster of row-major cell indices."""
        r = np.arange(self.height) // self.cell_h
        c = np.arange(self.width) // self.cell_w
        return r[:, None] * self.gw + c[None, :]

    def cell_slice(self, i: int):
        r, c = divmod(i, self.gw)
        return (slice(r * self.cell_h, (r + 1) * self.cell_h),
                slice(c * self.cell_w, (c + 1) * self.cell_w))


def make_grid(width: int, height: int, cell_size) -> SuperpixelGrid:
    """Regular grid; ``cell_size`` is an int or a (cell_h, cell_w) pair."""
    ch, cw = (cell_size, cell_size) if np.isscalar(cell_size) else cell_size
    ch, cw = int(ch), int(cw)
    if ch < 1 or cw < 1:
        raise ValueError("cell size must be positive")
    if height % ch or width % cw:
        raise ValueError(f"cell {ch}x{cw} does not divide image {height}x{width}")
    return SuperpixelGrid(int(height), int(width), ch, cw)


@dataclass
class AttributionMap:
    grid: SuperpixelGrid
    values: np.ndarray  # (M,) row-major
    target_class: int
    method: str  # "kernel_shap", "exact_shapley" or "gradcam"
    base_value: float = float("nan")
    full_value: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def values_2d(self) -> np.ndarray:
        return self.values.reshape(self.grid.gh, self.grid.gw)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "method": self.method,
            "target_class": int(self.target_class),
            "grid": {"height": g.height, "width": g.width, "cell_h": g.cell_h, "cell_w": g.cell_w,
                     "gh": g.gh, "gw": g.gw},
            "values": [float(v) for v in self.values],
            "base_value": None if math.isnan(self.base_value) else float(self.base_value),
            "full_value": None if math.isnan(self.full_value) else float(self.full_value),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionMap":
        g = d["grid"]
        grid = SuperpixelGrid(g["height"], g["width"], g["cell_h"], g["cell_w"])
        nan = float("nan")
        return cls(grid, np.array(d["values"], dtype=float), d["target_class"], d["method"],
                   nan if d.get("base_value") is None else d["base_value"],
                   nan if d.get("full_value") is None else d["full_value"])


def mask_images(image, grid: SuperpixelGrid, Z, baseline=0.0) -> np.ndarray:
    """Batch of masked copies: row ``Z[j]`` keeps cells with 1, baselines the rest."""
    image = np.asarray(image)
    Z = np.asarray(Z, dtype=bool)
    if Z.ndim != 2 or Z.shape[1] != grid.M:
        raise ValueError(f"coalitions must have {grid.M} entries")
    keep = Z[:, grid.labels()]  # (n, H, W)
    return np.where(keep[:, None], image[None], np.asarray(baseline, dtype=image.dtype))


def mask_image(image, grid: SuperpixelGrid, z, baseline=0.0) -> np.ndarray:
    return mask_images(image, grid, np.asarray(z)[None], baseline)[0]


def make_predict_fn(model: nn.Model, dtype=np.float64, batch_size: int = 32):
    """Wrap a model as a batched probability function (evaluated at ``dtype``).

    Small batches keep the im2col buffers in cache, which is markedly faster
    than one large batch.
    """
    m = model if model.dtype == np.dtype(dtype) else model.astype(dtype)

    def predict_fn(batch):
        out = [nn.forward(m, batch[s:s + batch_size]).probs for s in range(0, len(batch), batch_size)]
        return np.concatenate(out)

    return predict_fn


def _evaluate(predict_fn, image, grid, Z, baseline, target, batch_size=512):
    out = np.empty(len(Z))
    for s in range(0, len(Z), batch_size):
        probs = np.asarray(predict_fn(mask_images(image, grid, Z[s:s + batch_size], baseline)))
        out[s:s + batch_size] = probs[:, target]
    if not np.all(np.isfinite(out)):
        raise nn.NonFiniteError("model returned non-finite outputs")
    return out


def _endpoints(predict_fn, image, grid, baseline, target_class):
    probs = np.asarray(predict_fn(mask_images(image, grid, np.array([np.zeros(grid.M), np.ones(grid.M)]),
                                              baseline)))
    if target_class is None:
        target_class = int(np.argmax(probs[1]))
    return int(target_class), float(probs[0, target_class]), float(probs[1, target_class])


def shapley_kernel_weight(M: int, k) -> np.ndarray:
    """SHAP kernel weight of one coalition of size ``k`` (0 < k < M)."""
    k = np.asarray(k, dtype=float)
    return (M - 1) / (np.vectorize(math.comb)(M, k.astype(int)) * k * (M - k))


def sample_coalitions(M: int, n: int, rng, antithetic: bool = True) -> np.ndarray:
    """Draw ``n`` coalitions: size k with probability proportional to
    (M-1)/(k(M-k)), then a uniform k-subset. With ``antithetic`` each draw is
    followed by its complement, which has the same size probability."""
    ks = np.arange(1, M)
    p = (M - 1) / (ks * (M - ks))
    p = p / p.sum()
    n_draw = (n + 1) // 2 if antithetic else n
    k = rng.choice(ks, size=n_draw, p=p)
    ranks = np.argsort(rng.random((n_draw, M)), axis=1).argsort(axis=1)
    Z = ranks < k[:, None]
    if antithetic:
        Z = np.stack([Z, ~Z], axis=1).reshape(-1, M)[:n]
    return Z


def solve_constrained_wls(Z, y, weights, delta):
    """Weighted least squares for phi with sum(phi) == delta imposed exactly.

    ``y`` are coalition outputs minus the baseline output. The last player is
    eliminated (phi_M = delta - sum of the others) and the reduced normal
    equations are Cholesky-factorized; a 1e-10 ridge is added only if the
    factorization fails.
    """
    Z = np.asarray(Z, dtype=float)
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * delta
    Aw = A * weights[:, None]
    G = Aw.T @ A
    rhs = Aw.T @ b
    ridge = 0.0
    try:
        phi = linalg.cho_solve(linalg.cho_factor(G), rhs)
    except linalg.LinAlgError:
        ridge = 1e-10
        log.warning("normal equations singular; adding ridge %g", ridge)
        try:
            phi = linalg.cho_solve(linalg.cho_factor(G + ridge * np.eye(len(G))), rhs)
        except linalg.LinAlgError as err:
            raise SingularSystem("normal equations singular even with ridge; "
                                 "increase n_samples") from err
    return np.append(phi, delta - phi.sum()), ridge


def kernel_shap(predict_fn, image, grid: SuperpixelGrid, target_class=None, n_samples: int = 1000,
                baseline=0.0, rng=None, mode: str = "sampled", antithetic: bool = True,
                batch_size: int = 512) -> AttributionMap:
    """Kernel SHAP over the superpixel cells of ``image`` (C, H, W).

    ``mode="sampled"`` draws ``n_samples`` coalitions from the kernel's own
    size distribution, so each distinct coalition enters the regression with
    weight equal to its draw count. ``mode="full"`` enumerates every
    coalition with its exact kernel weight and reproduces the Shapley values.
    ``target_class=None`` explains the class predicted on the full image.
    """
    M = grid.M
    if M < 2:
        raise ValueError("need at least two players")
    target, f0, f1 = _endpoints(predict_fn, image, grid, baseline, target_class)
    delta = f1 - f0
    if mode == "full":
        if M > 20:
            raise ValueError(f"full enumeration of {M} players is too large")
        codes = np.arange(1, 2 ** M - 1)
        Z = ((codes[:, None] >> np.arange(M)) & 1).astype(bool)
        weights = shapley_kernel_weight(M, Z.sum(axis=1))
    elif mode == "sampled":
        if n_samples < M + 2:
            raise ValueError(f"n_samples must be at least M + 2 = {M + 2}")
        rng = np.random.default_rng() if rng is None else rng
        Z, weights = np.unique(sample_coalitions(M, n_samples, rng, antithetic), axis=0,
                               return_counts=True)
        weights = weights.astype(float)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = _evaluate(predict_fn, image, grid, Z, baseline, target, batch_size) - f0
    phi, ridge = solve_constrained_wls(Z, y, weights, delta)
    return AttributionMap(grid, phi, target, "kernel_shap", f0, f1,
                          {"mode": mode, "n_coalitions": int(len(Z)), "ridge": ridge})


def exact_shapley(predict_fn, image, grid: SuperpixelGrid, target_class=None,
                  baseline=0.0, batch_size: int = 512) -> AttributionMap:
    """Shapley values by direct enumeration of all 2^M coalitions (M <= 20)."""
    M = grid.M
    if M > 20:
        raise ValueError(f"exact enumeration needs M <= 20, got {M}")
    target, f0, f1 = _endpoints(predict_fn, image, grid, baseline, target_class)
    codes = np.arange(2 ** M)
    Z = ((codes[:, None] >> np.arange(M)) & 1).astype(bool)
    v = _evaluate(predict_fn, image, grid, Z, baseline, target, batch_size)
    sizes = Z.sum(axis=1)
    # weight of adding a player to a coalition of size s
    w = np.array([math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) for s in range(M)])
    phi = np.zeros(M)
    for i in range(M):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        phi[i] = np.sum(w[sizes[without]] * (v[without | bit] - v[without]))
    return AttributionMap(grid, phi, target, "exact_shapley", float(v[0]), float(v[-1]))


def shapley_by_permutations(value, M: int) -> np.ndarray:
    """Average marginal contribution over all M! orderings of ``value(set)``."""
    phi = np.zeros(M)
    perms = list(itertools.permutations(range(M)))
    for order in perms:
        s = set()
        prev = value(frozenset(s))
        for i in order:
            s.add(i)
            cur = value(frozenset(s))
            phi[i] += cur - prev
            prev = cur
    return phi / len(perms)


# ---------------------------------------------------------------- GradCAM

def bilinear_resize(a, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    a = np.asarray(a, dtype=float)
    h, w = a.shape
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(a, [yy, xx], order=1, mode="nearest")


def cam_from_features(A, dA) -> np.ndarray:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dA_k; inputs (K, h, w)."""
    alpha = dA.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, A, axes=1), 0.0)


def gradcam(model: nn.Model, image, layer_index=None, target_class=None) -> AttributionMap:
    """GradCAM on the output of ``layer_index`` (default: last conv block)."""
    li = model.default_cam_layer() if layer_index is None else int(layer_index)
    shape = model.shapes[li + 1]
    if len(shape) != 3 or shape[1] * shape[2] < 1:
        raise ValueError(f"layer {li} ({model.layers[li].kind}) has no spatial extent")
    trace = nn.forward(model, np.asarray(image)[None])
    if target_class is None:
        target_class = int(np.argmax(trace.logits[0]))
    grads = nn.backward(model, trace, int(target_class), input_grad=False)
    A = trace.activations[li + 1][:, 0].astype(float)  # (K, h, w)
    dA = grads.activations[li][:, 0].astype(float)
    cam = cam_from_features(A, dA)
    _, H, W = model.input_shape
    kh, kw = shape[1], shape[2]
    if H % kh or W % kw:
        raise ValueError(f"feature map {kh}x{kw} does not tile the {H}x{W} input")
    grid = SuperpixelGrid(H, W, H // kh, W // kw)
    fx = float(nn.softmax(trace.logits[0].astype(float))[target_class])
    return AttributionMap(grid, cam.ravel(), int(target_class), "gradcam", float("nan"), fx,
                          {"layer": li})


def expand_to_pixels(amap: AttributionMap) -> np.ndarray:
    """Pixel raster: mass-preserving replication for SHAP, bilinear for GradCAM."""
    g = amap.grid
    if amap.method == "gradcam":
        return np.maximum(bilinear_resize(amap.values_2d, g.height, g.width), 0.0)
    per_pixel = amap.values / g.cell_area
    return per_pixel[g.labels()]
