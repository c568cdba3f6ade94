"""Conditional box denoiser: BEV rasterization, residual network, refinement.

A proposal is treated as a noisy observation of a clean box. A small
network, conditioned on a timestep embedding and a super-category embedding
(five geometry-similarity groups), predicts the full residual from the
current normalized box state to the clean state; refinement walks a short
deterministic schedule that moves the state toward the predicted clean
estimate while contracting the residual noise scale. A confidence head is
trained against the 3D IoU of the corrected box with ground truth, and its
sigmoid output fuses with the seeker score at a fixed weighting.

Training only ever sees base-category boxes; generalization to the novel
categories rides on the super-category grouping and the BEV evidence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    UnknownCategory,
    UnsupportedVersion,
    WeightError,
)
from .geom import Box3D, fold_yaw, iou_3d, wrap_yaw
from .imcv import Proposal
from .nn import (
    Parameter,
    Tensor,
    affine,
    attention,
    concat,
    gelu,
    layer_norm,
    optimizer_step,
    params_from_state,
    params_to_state,
    row,
    sinusoidal_embedding,
    split2,
    zero_grads,
)
from .scene import CATEGORIES, Category, N_SUPER_CATEGORIES, Scene

CHECKPOINT_VERSION = 1

BEV_CHANNELS = ("log_count", "max_z", "min_z", "mean_z", "var_z", "mean_range")


def _super_group_mean_sizes() -> np.ndarray:
    sums = np.zeros((N_SUPER_CATEGORIES, 3))
    counts = np.zeros(N_SUPER_CATEGORIES)
    for cat in CATEGORIES.values():
        sums[cat.super_category] += np.asarray(cat.prior_size)
        counts[cat.super_category] += 1
    return sums / counts[:, None]


SUPER_GROUP_MEAN_SIZES = _super_group_mean_sizes()


def super_category_of(category: Category) -> int:
    """Map a category to its geometry group index in {0..4}.

    Categories from the built-in table carry a fixed assignment; anything
    else is grouped with the nearest group by relative L2 distance between
    its size prior and the group mean prior. Raises UnknownCategory when no
    prior size is available.
    """
    if category.super_category is not None:
        if not (0 <= category.super_category < N_SUPER_CATEGORIES):
            raise UnknownCategory(
                f"category {category.name!r} has super_category {category.super_category} "
                f"outside 0..{N_SUPER_CATEGORIES - 1}"
            )
        return category.super_category
    if category.prior_size is None:
        raise UnknownCategory(f"category {category.name!r} has no size prior")
    prior = np.asarray(category.prior_size, dtype=np.float64)
    rel = (prior[None, :] - SUPER_GROUP_MEAN_SIZES) / SUPER_GROUP_MEAN_SIZES
    return int(np.argmin(np.linalg.norm(rel, axis=1)))


def varifocal_loss(p: float, q: float, alpha: float = 0.75, gamma: float = 2.0) -> float:
    """Quality-weighted focal classification loss.

    For positive targets (q > 0) the binary cross-entropy against q is
    weighted by q itself; negatives (q = 0) are down-weighted by alpha * p^gamma.
    p must lie strictly inside (0, 1).
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"predicted probability must be in (0, 1), got {p}")
    if q > 0.0:
        return -q * (q * math.log(p) + (1.0 - q) * math.log(1.0 - p))
    return -alpha * p**gamma * math.log(1.0 - p)


def fuse_scores(
    iou_conf: float, seeker_score: float, w_iou: float = 0.6, w_seeker: float = 0.4
) -> float:
    """Weighted blend of geometric confidence and seeker score; weights sum to 1."""
    if abs(w_iou + w_seeker - 1.0) > 1e-9:
        raise WeightError(f"fusion weights must sum to 1, got {w_iou} + {w_seeker}")
    return w_iou * iou_conf + w_seeker * seeker_score


# ---------------------------------------------------------------------------
# BEV rasterization


@dataclass
class BevGrid:
    """C x ny x nx feature grid over [-extent, extent]^2 with square cells."""

    features: np.ndarray
    extent: float
    cell_size: float
    channels: tuple[str, ...] = BEV_CHANNELS

    @property
    def nx(self) -> int:
        return self.features.shape[2]

    @property
    def ny(self) -> int:
        return self.features.shape[1]


def rasterize_bev(scene: Scene, extent: float, cell_size: float) -> BevGrid:
    """Handcrafted per-cell point statistics over the world window.

    Channels: log1p point count, max z, min z, mean z, z variance, mean
    range from the ego origin. Empty cells are all zero. The window must be
    an integer number of cells wide.
    """
    n_f = 2.0 * extent / cell_size
    n = int(round(n_f))
    if abs(n_f - n) > 1e-9 or n < 1:
        raise ConfigError(
            f"extent {extent} is not an integer number of cells of size {cell_size}"
        )
    feats = np.zeros((len(BEV_CHANNELS), n, n))
    pts = scene.points
    if pts.shape[0]:
        inside = (np.abs(pts[:, 0]) <= extent) & (np.abs(pts[:, 1]) <= extent)
        p = pts[inside]
        if p.shape[0]:
            ix = np.clip(((p[:, 0] + extent) / cell_size).astype(np.int64), 0, n - 1)
            iy = np.clip(((p[:, 1] + extent) / cell_size).astype(np.int64), 0, n - 1)
            flat = iy * n + ix
            count = np.bincount(flat, minlength=n * n).astype(np.float64)
            z = p[:, 2]
            zsum = np.bincount(flat, weights=z, minlength=n * n)
            zsq = np.bincount(flat, weights=z * z, minlength=n * n)
            rng_sum = np.bincount(flat, weights=np.linalg.norm(p, axis=1), minlength=n * n)
            zmax = np.full(n * n, -np.inf)
            zmin = np.full(n * n, np.inf)
            np.maximum.at(zmax, flat, z)
            np.minimum.at(zmin, flat, z)
            occ = count > 0
            mean_z = np.where(occ, zsum / np.maximum(count, 1), 0.0)
            var_z = np.where(occ, zsq / np.maximum(count, 1) - mean_z**2, 0.0)
            var_z = np.maximum(var_z, 0.0)
            feats[0] = np.log1p(count).reshape(n, n)
            feats[1] = np.where(occ, zmax, 0.0).reshape(n, n)
            feats[2] = np.where(occ, zmin, 0.0).reshape(n, n)
            feats[3] = mean_z.reshape(n, n)
            feats[4] = var_z.reshape(n, n)
            feats[5] = np.where(occ, rng_sum / np.maximum(count, 1), 0.0).reshape(n, n)
    return BevGrid(features=feats, extent=float(extent), cell_size=float(cell_size))


def _bilinear_local(grid: BevGrid, x: float, y: float) -> tuple[np.ndarray, bool]:
    """Sample all channels at (x, y) by bilinear blend of the 4 nearest cell
    centers; positions outside the window are clamped and flagged."""
    out_of_extent = not (-grid.extent <= x <= grid.extent and -grid.extent <= y <= grid.extent)
    gx = (x + grid.extent) / grid.cell_size - 0.5
    gy = (y + grid.extent) / grid.cell_size - 0.5
    gx = min(max(gx, 0.0), grid.nx - 1.0)
    gy = min(max(gy, 0.0), grid.ny - 1.0)
    i0 = min(int(gx), grid.nx - 2) if grid.nx > 1 else 0
    j0 = min(int(gy), grid.ny - 2) if grid.ny > 1 else 0
    fx = gx - i0
    fy = gy - j0
    f = grid.features
    patch = (
        f[:, j0, i0] * (1 - fx) * (1 - fy)
        + f[:, j0, min(i0 + 1, grid.nx - 1)] * fx * (1 - fy)
        + f[:, min(j0 + 1, grid.ny - 1), i0] * (1 - fx) * fy
        + f[:, min(j0 + 1, grid.ny - 1), min(i0 + 1, grid.nx - 1)] * fx * fy
    )
    return patch[None, :], out_of_extent


def bev_tokens(grid: BevGrid, downsample: int) -> np.ndarray:
    """Pooled grid tokens, one per downsample x downsample block: the block's
    mean features plus its normalized center coordinates, shape (L, C+2)."""
    c, ny, nx = grid.features.shape
    if ny % downsample or nx % downsample:
        raise ConfigError(
            f"grid {ny}x{nx} not divisible by token downsample {downsample}"
        )
    by, bx = ny // downsample, nx // downsample
    pooled = grid.features.reshape(c, by, downsample, bx, downsample).mean(axis=(2, 4))
    step = grid.cell_size * downsample
    xs = (-grid.extent + step * (np.arange(bx) + 0.5)) / grid.extent
    ys = (-grid.extent + step * (np.arange(by) + 0.5)) / grid.extent
    px, py = np.meshgrid(xs, ys)
    return np.concatenate(
        [pooled.reshape(c, -1).T, px.reshape(-1, 1), py.reshape(-1, 1)], axis=1
    )


# ---------------------------------------------------------------------------
# schedule


@dataclass
class DiffusionSchedule:
    """Noise-level schedule: cumulative signal coefficients over T steps.

    alpha_bar[0] = 1 (noising at step 0 is the identity) and alpha_bar is
    strictly decreasing; the additive noise scale at step t is
    sqrt(1 - alpha_bar[t]).
    """

    n_steps: int
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, n_steps: int, beta_start: float, beta_end: float) -> "DiffusionSchedule":
        if n_steps < 1:
            raise ConfigError("schedule needs at least one step")
        betas = np.linspace(beta_start, beta_end, n_steps)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("schedule betas must lie in (0, 1)")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(n_steps=n_steps, alpha_bar=alpha_bar)

    def noise_scale(self, t: int) -> float:
        return math.sqrt(1.0 - float(self.alpha_bar[t]))

    def inference_steps(self, t_start: int, n_steps: int) -> list[int]:
        """Descending timesteps from t_start to 0, at most n_steps transitions."""
        if not (0 <= t_start <= self.n_steps):
            raise ConfigError(f"t_start {t_start} outside schedule 0..{self.n_steps}")
        if t_start == 0:
            return [0]
        taus = np.unique(np.round(np.linspace(t_start, 0, n_steps + 1)).astype(int))[::-1]
        return [int(t) for t in taus]


# ---------------------------------------------------------------------------
# model


@dataclass
class DenoiserConfig:
    """Architecture, grid, and schedule settings for the denoiser."""

    feat_dim: int = 32
    bev_extent: float = 40.0
    bev_cell: float = 0.5
    token_downsample: int = 4
    n_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s_steps: int = 8
    t_start: int = 200
    eta: float = 0.0
    z_half: float = 4.0

    def validate(self) -> None:
        if self.feat_dim < 2 or self.feat_dim % 2:
            raise ConfigError("model.feat_dim must be an even integer >= 2")
        if self.bev_extent <= 0 or self.bev_cell <= 0:
            raise ConfigError("model.bev_extent and model.bev_cell must be positive")
        if self.token_downsample < 1:
            raise ConfigError("model.token_downsample must be >= 1")
        if not (0 <= self.t_start <= self.n_train_steps):
            raise ConfigError("model.t_start must lie within the training schedule")
        if self.s_steps < 1:
            raise ConfigError("model.s_steps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ConfigError("model.eta must be in [0, 1]")
        n_f = 2.0 * self.bev_extent / self.bev_cell
        if abs(n_f - round(n_f)) > 1e-9:
            raise ConfigError("bev window must be an integer number of cells")
        if int(round(n_f)) % self.token_downsample:
            raise ConfigError("bev grid must be divisible by token_downsample")


@dataclass
class BoxState:
    """Normalized box vector (cx, cy, cz, l, w, h, sin yaw, cos yaw) at step t."""

    vec: np.ndarray
    t: int


class DenoiserModel:
    """All learnable state of the residual network plus its schedule and
    normalization constants."""

    def __init__(self, config: DenoiserConfig, params: dict[str, Parameter]):
        config.validate()
        self.config = config
        self.params = params
        self.schedule = DiffusionSchedule.linear(
            config.n_train_steps, config.beta_start, config.beta_end
        )
        self.group_sizes = SUPER_GROUP_MEAN_SIZES.copy()

    # -- construction ----------------------------------------------------

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0) -> "DenoiserModel":
        config.validate()
        rng = np.random.default_rng(seed)
        c = config.feat_dim

        def init(name: str, n_in: int, n_out: int, zero: bool = False) -> None:
            if zero:
                params[name + "_w"] = Parameter(np.zeros((n_in, n_out)), name + "_w")
            else:
                params[name + "_w"] = Parameter(
                    rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), name + "_w"
                )
            params[name + "_b"] = Parameter(np.zeros((1, n_out)), name + "_b")

        params: dict[str, Parameter] = {}
        init("local", len(BEV_CHANNELS), c)
        init("box1", 8, c)
        init("box2", c, c)
        init("query", 2 * c, c)
        init("key", len(BEV_CHANNELS) + 2, c)
        init("value", len(BEV_CHANNELS) + 2, c)
        params["attn_gain"] = Parameter(np.ones((1, c)), "attn_gain")
        params["attn_bias"] = Parameter(np.zeros((1, c)), "attn_bias")
        init("cond1", 2 * c, 2 * c)
        init("cond2", 2 * c, 2 * c)
        # zero-init FiLM so modulation starts as the identity
        init("film", 2 * c, 2 * c, zero=True)
        init("res1", c, c)
        # zero-init the residual output layer so a fresh model predicts zero
        init("res2", c, 8, zero=True)
        init("conf1", c, c)
        init("conf2", c, 1, zero=True)
        params["super_emb"] = Parameter(
            rng.normal(0.0, 0.1, (N_SUPER_CATEGORIES, c)), "super_emb"
        )
        return cls(config, params)

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    # -- persistence -------------------------------------------------------

    def to_dict(self, train_progress: Optional[dict] = None, header: Optional[dict] = None) -> dict:
        doc: dict = {"version": CHECKPOINT_VERSION, "kind": "denoiser-checkpoint"}
        if header is not None:
            doc["header"] = header
        doc["config"] = asdict(self.config)
        doc["params"] = params_to_state(self.parameters())
        doc["train_progress"] = train_progress
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["DenoiserModel", Optional[dict]]:
        if doc.get("kind") != "denoiser-checkpoint":
            raise CheckpointError("not a denoiser checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise UnsupportedVersion(
                f"checkpoint version {doc.get('version')} not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        config = DenoiserConfig(**doc["config"])
        params = params_from_state(doc["params"])
        model = cls(config, params)
        return model, doc.get("train_progress")

    def save(self, path, train_progress: Optional[dict] = None, header: Optional[dict] = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(train_progress, header), f, allow_nan=False, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path) -> tuple["DenoiserModel", Optional[dict]]:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: invalid JSON at line {e.lineno}") from e
        return cls.from_dict(doc)

    # -- normalization -----------------------------------------------------

    def normalize_box(self, box: Box3D, super_cat: int) -> np.ndarray:
        cx, cy, cz = box.center
        sizes = np.asarray(box.size) / self.group_sizes[super_cat]
        # boxes are 180-degree symmetric: fold yaw so equivalent orientations
        # map to the same state vector
        yaw = fold_yaw(box.yaw)
        return np.array(
            [
                cx / self.config.bev_extent,
                cy / self.config.bev_extent,
                cz / self.config.z_half,
                *np.log(sizes),
                math.sin(yaw),
                math.cos(yaw),
            ]
        )

    def denormalize_box(self, vec: np.ndarray, super_cat: int) -> Box3D:
        sizes = np.exp(vec[3:6]) * self.group_sizes[super_cat]
        yaw = math.atan2(vec[6], vec[7])
        return Box3D(
            (
                float(vec[0]) * self.config.bev_extent,
                float(vec[1]) * self.config.bev_extent,
                float(vec[2]) * self.config.z_half,
            ),
            tuple(float(s) for s in sizes),
            wrap_yaw(yaw),
        )

    def encode_tokens(self, bev: BevGrid) -> tuple[Tensor, Tensor]:
        """Project pooled grid tokens to attention keys and values."""
        toks = Tensor(bev_tokens(bev, self.config.token_downsample))
        p = self.params
        k = affine(toks, p["key_w"], p["key_b"])
        v = affine(toks, p["value_w"], p["value_b"])
        return k, v


def _renorm_yaw_pair(vec: np.ndarray) -> np.ndarray:
    out = vec.copy()
    n = math.hypot(out[6], out[7])
    if n < 1e-12:
        out[6], out[7] = 0.0, 1.0
    else:
        out[6] /= n
        out[7] /= n
    return out


def _forward(
    model: DenoiserModel,
    bev: BevGrid,
    tokens: tuple[Tensor, Tensor],
    state: BoxState,
    super_cat: int,
) -> tuple[Tensor, Tensor, bool]:
    """Shared forward pass given precomputed attention tokens."""
    if not (0 <= super_cat < N_SUPER_CATEGORIES):
        raise UnknownCategory(f"super-category index {super_cat} out of range")
    p = model.params
    c = model.config.feat_dim
    x = float(state.vec[0]) * model.config.bev_extent
    y = float(state.vec[1]) * model.config.bev_extent
    f_local_np, out_of_extent = _bilinear_local(bev, x, y)

    f_local = affine(Tensor(f_local_np), p["local_w"], p["local_b"])
    h = gelu(affine(Tensor(state.vec[None, :]), p["box1_w"], p["box1_b"]))
    phi_box = affine(h, p["box2_w"], p["box2_b"])
    q = concat([f_local, phi_box], axis=1)
    q_proj = affine(q, p["query_w"], p["query_b"])
    k, v = tokens
    att = attention(q_proj, k, v)
    f_query = layer_norm(att + q_proj, p["attn_gain"], p["attn_bias"])

    e_t = Tensor(sinusoidal_embedding(state.t, c))
    e_super = row(p["super_emb"], super_cat)
    cond = gelu(affine(concat([e_t, e_super], axis=1), p["cond1_w"], p["cond1_b"]))
    e_cond = affine(cond, p["cond2_w"], p["cond2_b"])
    gb = affine(e_cond, p["film_w"], p["film_b"])
    gamma, beta = split2(gb, c)
    f_mod = (gamma + 1.0) * f_query + beta

    r = gelu(affine(f_mod, p["res1_w"], p["res1_b"]))
    # the head learns a unit-scale correction field; the schedule's noise
    # scale at step t sets the output magnitude, so predictions vanish as
    # the state approaches the clean end of the schedule
    delta = affine(r, p["res2_w"], p["res2_b"]) * model.schedule.noise_scale(state.t)
    cz = gelu(affine(f_mod, p["conf1_w"], p["conf1_b"]))
    logit = affine(cz, p["conf2_w"], p["conf2_b"])
    return delta, logit, out_of_extent


def forward_residual(
    model: DenoiserModel, bev: BevGrid, state: BoxState, super_cat: int
) -> tuple[Tensor, Tensor, bool]:
    """Predict (residual to the clean state, confidence logit) for one state.

    The returned flag is True when the state's center left the grid window
    (the local feature sample is clamped to the border in that case).
    """
    return _forward(model, bev, model.encode_tokens(bev), state, super_cat)


def ddim_refine(
    model: DenoiserModel,
    bev: BevGrid,
    proposal: Proposal,
    s_steps: Optional[int] = None,
    eta: Optional[float] = None,
    t_start: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Box3D, float, bool]:
    """Iteratively refine one proposal; returns (box, confidence, oob flag).

    Each step predicts the clean estimate x0 = x + delta and applies the
    deterministic transition that rescales the remaining residual by the
    schedule's noise-contraction ratio; eta > 0 re-injects schedule-scaled
    gaussian noise. With eta = 0 a zero-residual model is an exact fixed
    point, and a one-step oracle lands exactly on its clean estimate.
    """
    cfg = model.config
    s_steps = cfg.s_steps if s_steps is None else s_steps
    eta = cfg.eta if eta is None else eta
    t_start = cfg.t_start if t_start is None else t_start
    if eta > 0 and rng is None:
        rng = np.random.default_rng(0)

    super_cat = super_category_of(proposal.category)
    x_init = model.normalize_box(proposal.box, super_cat)
    x = x_init
    tokens = model.encode_tokens(bev)
    taus = model.schedule.inference_steps(t_start, s_steps)
    a_bar = model.schedule.alpha_bar
    oob_any = False
    logit = None
    for idx in range(len(taus) - 1):
        t, t_next = taus[idx], taus[idx + 1]
        delta, logit, oob = _forward(model, bev, tokens, BoxState(x, t), super_cat)
        oob_any |= oob
        x0_hat = x + delta.data[0]
        sig_t = math.sqrt(1.0 - float(a_bar[t]))
        sig_next = math.sqrt(1.0 - float(a_bar[t_next]))
        if eta > 0:
            noise_std = eta * (sig_next / sig_t) * math.sqrt(
                max(1.0 - float(a_bar[t]) / float(a_bar[t_next]), 0.0)
            )
            dir_coef = math.sqrt(max(sig_next**2 - noise_std**2, 0.0)) / sig_t
            x_new = x0_hat + dir_coef * (x - x0_hat) + noise_std * rng.standard_normal(8)
        else:
            x_new = x0_hat + (sig_next / sig_t) * (x - x0_hat)
        # a no-op transition must not disturb the yaw pair (exact fixed point)
        if not (x_new[6] == x[6] and x_new[7] == x[7]):
            x_new = _renorm_yaw_pair(x_new)
        x = x_new
    if logit is None:  # t_start == 0: no transitions, still report confidence
        _, logit, oob = _forward(model, bev, tokens, BoxState(x, 0), super_cat)
        oob_any |= oob
    conf = 1.0 / (1.0 + math.exp(-float(logit.data[0, 0])))
    if np.array_equal(x, x_init):
        return proposal.box, conf, oob_any
    return model.denormalize_box(x, super_cat), conf, oob_any


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Optimization settings for denoiser training."""

    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 0.01
    lambda_conf: float = 1.0
    seed: int = 0
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.weight_decay < 0 or self.lambda_conf < 0:
            raise ConfigError("train.weight_decay and train.lambda_conf must be >= 0")


@dataclass
class TrainResult:
    loss_history: list[float] = field(default_factory=list)
    completed_steps: int = 0


def _check_base_only(scenes: list[Scene]) -> None:
    for si, scene in enumerate(scenes):
        for _, cat in scene.gt_boxes:
            if not cat.is_base:
                raise ConfigError(
                    f"training corpus must contain base categories only; "
                    f"scene {si} has {cat.name!r}"
                )


def _vfl_terms(logit: Tensor, q: float, alpha: float, gamma: float) -> Tensor:
    """In-graph varifocal loss on a raw logit with a constant quality target."""
    if q > 0.0:
        neg_log_p = (-logit).softplus()
        neg_log_1mp = logit.softplus()
        return q * q * neg_log_p + q * (1.0 - q) * neg_log_1mp
    return alpha * (logit.sigmoid() ** gamma) * logit.softplus()


def train(
    model: DenoiserModel,
    scenes: list[Scene],
    config: TrainConfig,
    start_step: int = 0,
    loss_history: Optional[list[float]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Residual + confidence training over base-category scenes, in place.

    One optimizer step per scene visit, batching all of that scene's boxes.
    Per sample a timestep is drawn uniformly from [1, T], the normalized gt
    vector is perturbed by gaussian noise at the schedule's scale for that
    step, the network predicts the residual back to the clean vector (L1),
    and the confidence logit is trained with a varifocal loss against the 3D
    IoU of the corrected box with the ground truth. All randomness is keyed
    on (seed, visit index), so a run may be resumed bit-identically from any
    step boundary. Raises ConfigError if any novel-category box is present.
    """
    config.validate()
    _check_base_only(scenes)
    history = list(loss_history) if loss_history else []
    if not scenes or config.epochs == 0:
        return TrainResult(history, start_step)

    visits: list[int] = []
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 1, epoch]).permutation(len(scenes))
        visits.extend(int(i) for i in perm)

    end_step = len(visits) if max_steps is None else min(max_steps, len(visits))
    params = model.parameters()
    a_bar = model.schedule.alpha_bar
    n_train = model.schedule.n_steps
    for v in range(start_step, end_step):
        scene = scenes[visits[v]]
        if not scene.gt_boxes:
            history.append(0.0)
            continue
        rng = np.random.default_rng([config.seed, 2, v])
        bev = rasterize_bev(scene, model.config.bev_extent, model.config.bev_cell)
        tokens = model.encode_tokens(bev)
        losses = []
        for box, cat in scene.gt_boxes:
            super_cat = super_category_of(cat)
            x0 = model.normalize_box(box, super_cat)
            t = int(rng.integers(1, n_train + 1))
            noise = rng.standard_normal(8)
            xt = _renorm_yaw_pair(x0 + math.sqrt(1.0 - float(a_bar[t])) * noise)
            delta, logit, _ = _forward(model, bev, tokens, BoxState(xt, t), super_cat)
            target = Tensor((x0 - xt)[None, :])
            loss_res = (delta - target).abs().mean()
            corrected = xt + delta.data[0]
            q = iou_3d(model.denormalize_box(_renorm_yaw_pair(corrected), super_cat), box)
            loss = loss_res + config.lambda_conf * _vfl_terms(
                logit.reshape(1), q, config.vfl_alpha, config.vfl_gamma
            ).sum()
            losses.append(loss)
        batch_loss = sum(losses[1:], losses[0]) * (1.0 / len(losses))
        zero_grads(params)
        batch_loss.backward()
        optimizer_step(params, config.lr, config.weight_decay)
        history.append(float(batch_loss.data))
    return TrainResult(history, end_step)


# ---------------------------------------------------------------------------
# gradient checking of the full loss


def small_gradcheck_config() -> DenoiserConfig:
    """A reduced-width config engaging every layer, small enough for full
    coordinate-sweep finite differencing."""
    return DenoiserConfig(
        feat_dim=8,
        bev_extent=8.0,
        bev_cell=1.0,
        token_downsample=2,
        n_train_steps=100,
        t_start=20,
        s_steps=4,
    )


def full_loss_gradcheck(
    seed: int = 0,
    n_states: int = 3,
    lambda_conf: float = 1.0,
    fd_step: float = 1e-5,
):
    """Finite-difference check of the complete training loss at random states.

    Builds a reduced-width model over a random point cloud, then sweeps every
    parameter coordinate with central differences at `n_states` random
    (state, timestep, super-category) tuples. The confidence target is frozen
    at its evaluation-point value, matching what backward differentiates.
    Returns the worst GradCheckReport across states.
    """
    from .nn import GradCheckReport, gradient_check

    rng = np.random.default_rng(seed)
    cfg = small_gradcheck_config()
    model = DenoiserModel.create(cfg, seed=seed)
    # give the zero-initialized output layers nonzero weights so their
    # gradients exercise downstream paths
    for name in ("res2_w", "conf2_w", "film_w"):
        p = model.params[name]
        p.data = rng.normal(0.0, 0.1, p.data.shape)

    pts = np.column_stack(
        [
            rng.uniform(-cfg.bev_extent, cfg.bev_extent, 200),
            rng.uniform(-cfg.bev_extent, cfg.bev_extent, 200),
            rng.uniform(0.0, 2.0, 200),
        ]
    )
    scene = Scene(points=pts, gt_boxes=[], cameras=[], seed=seed)
    bev = rasterize_bev(scene, cfg.bev_extent, cfg.bev_cell)
    params = model.parameters()

    worst: Optional[GradCheckReport] = None
    for _ in range(n_states):
        x0 = np.concatenate(
            [
                rng.uniform(-0.5, 0.5, 3),
                rng.uniform(-0.3, 0.3, 3),
                _renorm_yaw_pair(np.concatenate([np.zeros(6), rng.normal(0, 1, 2)]))[6:],
            ]
        )
        t = int(rng.integers(1, cfg.n_train_steps + 1))
        xt = _renorm_yaw_pair(x0 + model.schedule.noise_scale(t) * rng.standard_normal(8))
        super_cat = int(rng.integers(0, N_SUPER_CATEGORIES))
        q = float(rng.uniform(0.0, 0.9)) if rng.random() > 0.3 else 0.0
        target = Tensor((x0 - xt)[None, :])

        def loss_fn():
            delta, logit, _ = forward_residual(model, bev, BoxState(xt, t), super_cat)
            loss_res = (delta - target).abs().mean()
            return loss_res + lambda_conf * _vfl_terms(logit.reshape(1), q, 0.75, 2.0).sum()

        report = gradient_check(loss_fn, params, step=fd_step)
        if worst is None or report.max_rel_error > worst.max_rel_error:
            worst = report
    assert worst is not None
    return worst


# ---------------------------------------------------------------------------
# systematic corruption used by the evaluation corpus


@dataclass
class BiasConfig:
    """Structured systematic corruption: a range-proportional radial center
    shift, a multiplicative size rescale, and a constant yaw offset."""

    range_shift_frac: float = 0.05
    size_scale: float = 0.85
    yaw_shift: float = 0.0


def apply_systematic_bias(box: Box3D, bias: BiasConfig) -> Box3D:
    """Deterministically corrupt a box with the structured bias family."""
    cx, cy, cz = box.center
    r = math.hypot(cx, cy)
    if r > 1e-9:
        shift = bias.range_shift_frac * r
        cx += shift * cx / r
        cy += shift * cy / r
    size = tuple(s * bias.size_scale for s in box.size)
    return Box3D((cx, cy, cz), size, wrap_yaw(box.yaw + bias.yaw_shift))
