"""Synthetic single-object monocular scenes and a small detector trained on them.

Each scene is a 32x32 RGB image holding one object drawn as a filled
rectangle over its projected 2D box. A random ambient level lights the
background. The object reflects ambient light plus a key light whose strength
falls with log depth, tinted by the category colour, and a grey horizontal
ramp across the box encodes the yaw. Inside the box only the sum of ambient
and key light is visible, so reading depth from brightness needs the
background level from elsewhere in the image.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import alfr as alfr_mod
from .alfr import AlfrParams, Conv1x1
from .dit import DitParams, score_variant, trading_loss
from .evaluation import evaluate_category, nms_2d
from .kitti_io import CalibP2, KittiObjectLabel, project_box
from .losses import (
    AppearanceTarget,
    ClusteringConfig,
    DetectionPreds,
    LocalizationTarget,
    group_terms,
    loss_terms,
    wrap_angle,
)
from .tensor import (
    ConfigurationError,
    Parameter,
    SGD,
    Tensor,
    avg_pool2x2,
    backward,
    conv2d,
    exp,
    init_uniform,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    stack,
)

IMAGE_SIZE = 32
FOCAL = 32.0
PRINCIPAL = 16.0
CALIB = CalibP2.pinhole(FOCAL, PRINCIPAL, PRINCIPAL)
CATEGORY_NAMES = ("Car", "Pedestrian", "Cyclist")
N_CLASSES = len(CATEGORY_NAMES)
BACKGROUND = N_CLASSES
# (h, w, l) ranges per category; pairwise disjoint in at least one extent
DIM_RANGES = {
    0: ((1.40, 1.70), (1.55, 1.85), (3.60, 4.40)),
    1: ((1.60, 1.90), (0.50, 0.70), (0.60, 0.90)),
    2: ((1.55, 1.85), (0.55, 0.75), (1.60, 1.90)),
}
COLORS = np.array([[0.95, 0.25, 0.20], [0.20, 0.90, 0.30], [0.25, 0.30, 0.95]])
DEPTH_RANGE = (6.0, 18.0)
GROUND_Y = 1.65
AMBIENT_RANGE = (0.0, 0.5)
RAMP_AMPLITUDE = 0.3
NOISE = 0.01
# head decoding priors
DIMS_PRIOR = np.array([1.0, 1.7, 2.3])  # w, h, l
DEPTH_PRIOR = 10.0
DEPTH_GAIN = 4.0
BOX_PRIOR = 4.0
STRIDE = 2
INPUT_SCALE = 2.0

APP_CHANNELS = N_CLASSES + 1 + 1 + 3
LOC_CHANNELS = 4 + 3


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step, self.value = step, value
        super().__init__(f"non-finite loss {value} at step {step}")


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3 x 32 x 32
    category: int
    dims: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom centre, camera frame
    rotation_y: float
    box2d: tuple[float, float, float, float]
    ambient: float
    seed: int

    @property
    def center_pixel(self) -> tuple[float, float]:
        u, v, u2, v2 = self.box2d
        return (u + u2) / 2.0, (v + v2) / 2.0

    @property
    def cell(self) -> tuple[int, int]:
        """(row, col) of the feature cell holding the 2D box centre."""
        uc, vc = self.center_pixel
        return int(vc // STRIDE), int(uc // STRIDE)

    def appearance_target(self) -> AppearanceTarget:
        h, w, l = self.dims
        return AppearanceTarget(self.category, self.rotation_y, (w, h, l))

    def localization_target(self) -> LocalizationTarget:
        return LocalizationTarget(self.box2d, self.location)

    def label(self) -> KittiObjectLabel:
        x, _, z = self.location
        return KittiObjectLabel(
            category=CATEGORY_NAMES[self.category], truncation=0.0, occlusion=0,
            alpha=wrap_angle(self.rotation_y - math.atan2(x, z)), box2d=self.box2d,
            dims=self.dims, location=self.location, rotation_y=self.rotation_y,
        )


def depth_brightness(z: float) -> float:
    """Object brightness above ambient, falling linearly in log depth from 1 to 0.5."""
    z0, z1 = DEPTH_RANGE
    return 1.0 - 0.5 * math.log(z / z0) / math.log(z1 / z0)


def generate_scene(seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    category = int(rng.integers(N_CLASSES))
    while True:
        dims = tuple(float(rng.uniform(*r)) for r in DIM_RANGES[category])
        z = float(rng.uniform(*DEPTH_RANGE))
        u_c = float(rng.uniform(3.0, IMAGE_SIZE - 3.0))
        x = (u_c - PRINCIPAL) * z / FOCAL
        y = GROUND_Y + float(rng.uniform(-0.1, 0.1))
        ry = float(rng.uniform(-math.pi / 2, math.pi / 2))
        box = project_box(CALIB, dims, (x, y, z), ry)
        if box[0] >= 0.0 and box[1] >= 0.0 and box[2] < IMAGE_SIZE and box[3] < IMAGE_SIZE:
            break
    ambient = float(rng.uniform(*AMBIENT_RANGE))
    image = ambient + rng.normal(0.0, NOISE, size=(3, IMAGE_SIZE, IMAGE_SIZE))
    c0, c1 = int(math.floor(box[0])), int(math.ceil(box[2]))
    r0, r1 = int(math.floor(box[1])), int(math.ceil(box[3]))
    c1, r1 = max(c1, c0 + 1), max(r1, r0 + 1)
    half = max((box[2] - box[0]) / 2.0, 0.5)
    cols = np.arange(c0, c1) + 0.5
    t = np.clip((cols - (box[0] + box[2]) / 2.0) / half, -1.0, 1.0)
    ramp = RAMP_AMPLITUDE * (ry / (math.pi / 2)) * t
    # the object reflects ambient and key light alike, so only their sum is visible inside the box
    shade = (ambient + depth_brightness(z)) * COLORS[category][:, None, None] + ramp[None, None, :]
    image[:, r0:r1, c0:c1] = shade + rng.normal(0.0, NOISE, size=(3, r1 - r0, c1 - c0))
    return SyntheticScene(image, category, dims, (x, y, z), ry, box, ambient, int(seed))


def scene_seed(run_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(run_seed), int(step)]).generate_state(1)[0])


def heldout_seeds(n: int, offset: int = 10_000_000) -> list[int]:
    return [offset + i for i in range(n)]


# ---------------------------------------------------------------------------
# detector


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_power: float = 0.9
    seed: int = 0
    batch_size: int = 1
    channels: int = 16
    reduction: int = 4
    use_alfr: bool = True
    self_reflect: bool = True
    alfr_flow: str = "both"
    use_dit: bool = True
    dit_variant: str = "learned"
    rot_stream: str = "appearance"
    whl_stream: str = "appearance"
    app_loss_scale: float = 1.0
    grad_clip: float = 2.0

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise ConfigurationError(f"steps must be at least 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.alfr_flow not in alfr_mod.FLOWS:
            raise ConfigurationError(f"unknown alfr flow {self.alfr_flow!r}")
        if self.use_alfr and not self.self_reflect and self.alfr_flow != "both":
            raise ConfigurationError("self_reflect=False needs alfr_flow='both'")
        ClusteringConfig(self.rot_stream, self.whl_stream)
        if self.channels % self.reduction:
            raise ConfigurationError("channels must be divisible by reduction")
        return self

    @property
    def clustering(self) -> ClusteringConfig:
        return ClusteringConfig(self.rot_stream, self.whl_stream)


@dataclass
class ToyDetector:
    enc1_w: Parameter
    enc1_b: Parameter
    enc2_w: Parameter
    enc2_b: Parameter
    alfr: AlfrParams
    app_head: Conv1x1
    loc_head: Conv1x1
    dit: DitParams
    cfg: TrainConfig

    @classmethod
    def create(cls, cfg: TrainConfig) -> "ToyDetector":
        cfg.validate()
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xD7]))
        c = cfg.channels
        return cls(
            enc1_w=Parameter(init_uniform(rng, (c, 3, 3, 3), 27), "encoder.conv1.weight"),
            enc1_b=Parameter(np.zeros(c), "encoder.conv1.bias"),
            enc2_w=Parameter(init_uniform(rng, (c, c, 3, 3), 9 * c), "encoder.conv2.weight"),
            enc2_b=Parameter(np.zeros(c), "encoder.conv2.bias"),
            alfr=AlfrParams.create(c, cfg.reduction, rng),
            app_head=Conv1x1.create(rng, c, APP_CHANNELS, "head.app"),
            loc_head=Conv1x1.create(rng, c, LOC_CHANNELS, "head.loc"),
            dit=DitParams.create(c, cfg.reduction, rng, variant=cfg.dit_variant),
            cfg=cfg,
        )

    def all_parameters(self) -> list[Parameter]:
        return ([self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b] + self.alfr.parameters()
                + self.app_head.parameters() + self.loc_head.parameters()
                + self.dit.head_app.parameters() + self.dit.head_loc.parameters()
                + [self.dit.init_app_raw, self.dit.init_loc_raw])

    def parameters(self) -> list[Parameter]:
        """Parameters that the configured forward pass actually reaches."""
        cfg = self.cfg
        out = [self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b]
        if cfg.use_alfr:
            skip = set()
            if not cfg.self_reflect or cfg.alfr_flow in ("none", "app_to_loc"):
                skip.add(self.alfr.mix_app_raw.name)
            if not cfg.self_reflect or cfg.alfr_flow in ("none", "loc_to_app"):
                skip.add(self.alfr.mix_loc_raw.name)
            out += [p for p in self.alfr.parameters() if p.name not in skip]
        out += self.app_head.parameters() + self.loc_head.parameters()
        if cfg.use_dit:
            out += self.dit.parameters()
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.all_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.all_parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, arr in state.items():
            if name not in params:
                raise KeyError(f"unexpected parameter {name!r}")
            if params[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {np.shape(arr)}")
            params[name].data = np.array(arr, dtype=np.float64)


@dataclass
class ForwardOutput:
    preds: DetectionPreds
    f_star_app: Tensor
    f_star_loc: Tensor
    f_shared: Tensor
    cell: tuple[int, int]


def normalize_image(image: np.ndarray) -> np.ndarray:
    return (image - 0.25) * INPUT_SCALE


def encode(det: ToyDetector, image: np.ndarray) -> Tensor:
    h = relu(conv2d(Tensor(normalize_image(image)), det.enc1_w, det.enc1_b))
    h = relu(conv2d(h, det.enc2_w, det.enc2_b))
    return avg_pool2x2(h)


def _read_head(feature: Tensor, head: Conv1x1, cell: tuple[int, int]) -> Tensor:
    c = feature.shape[0]
    k = head.weight.shape[0]
    vec = reshape(feature[:, cell[0], cell[1]], (c, 1))
    out = matmul(reshape(head.weight, (k, c)), vec)
    return reshape(out, (k,)) + head.bias


def decode(app_out: Tensor, loc_out: Tensor, cell: tuple[int, int]) -> DetectionPreds:
    pu = STRIDE * cell[1] + STRIDE / 2.0
    pv = STRIDE * cell[0] + STRIDE / 2.0
    ext = exp(loc_out[0:4]) * BOX_PRIOR
    box = stack([pu - ext[0], pv - ext[1], pu + ext[2], pv + ext[3]])
    z = exp(loc_out[6] * (1.0 / DEPTH_GAIN)) * DEPTH_PRIOR
    x = (loc_out[4] + (pu - PRINCIPAL)) * z * (1.0 / FOCAL)
    y = loc_out[5] + GROUND_Y
    return DetectionPreds(
        logits=app_out[0:N_CLASSES + 1],
        rot=app_out[N_CLASSES + 1],
        dims=app_out[N_CLASSES + 2:N_CLASSES + 5] + DIMS_PRIOR,
        box2d=box,
        center3d=stack([x, y, z]),
    )


def forward(det: ToyDetector, scene: SyntheticScene, cell: tuple[int, int] | None = None) -> ForwardOutput:
    """Encoder, optional feature-reflecting block, and both heads read at one cell.

    Training reads the cell under the ground-truth box centre.
    """
    cfg = det.cfg
    cell = scene.cell if cell is None else cell
    f_s = encode(det, scene.image)
    if cfg.use_alfr:
        out = alfr_mod.alfr_forward(f_s, det.alfr, cfg.alfr_flow, self_reflect_on=cfg.self_reflect)
        f_app, f_loc = out.f_star_app, out.f_star_loc
    else:
        f_app = f_loc = f_s
    preds = decode(_read_head(f_app, det.app_head, cell), _read_head(f_loc, det.loc_head, cell), cell)
    return ForwardOutput(preds, f_app, f_loc, f_s, cell)


# ---------------------------------------------------------------------------
# training


@dataclass
class HistoryRow:
    step: int
    l_app: float
    l_loc: float
    s_app: float
    s_loc: float
    total: float


def train_step_loss(det: ToyDetector, scenes: Sequence[SyntheticScene]):
    cfg = det.cfg
    cluster = cfg.clustering
    l_app = l_loc = None
    scores = []
    for scene in scenes:
        fwd = forward(det, scene)
        a, b = group_terms(loss_terms(fwd.preds, scene.appearance_target(), scene.localization_target()), cluster)
        l_app = a if l_app is None else l_app + a
        l_loc = b if l_loc is None else l_loc + b
        if cfg.use_dit:
            scores.append(score_variant(cfg.dit_variant, fwd.f_star_app, fwd.f_star_loc, fwd.f_shared, det.dit))
    n = float(len(scenes))
    l_app = l_app * (cfg.app_loss_scale / n)
    l_loc = l_loc * (1.0 / n)
    if not cfg.use_dit:
        return l_app + l_loc, l_app, l_loc, None
    s = scores[0]
    if len(scores) > 1:
        from .dit import TradingScores
        s = TradingScores(sum((t.s_app for t in scores[1:]), scores[0].s_app) * (1.0 / n),
                          sum((t.s_loc for t in scores[1:]), scores[0].s_loc) * (1.0 / n))
    return trading_loss(l_app, l_loc, s), l_app, l_loc, s


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    """Polynomial decay ``base * (1 - step / total) ** power``; ``power=0`` keeps it constant."""
    return base * (1.0 - step / total) ** power


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


def train(cfg: TrainConfig, det: ToyDetector | None = None,
          callback: Callable[[HistoryRow], None] | None = None) -> tuple[ToyDetector, list[HistoryRow]]:
    """Seed-deterministic SGD on freshly sampled scenes; returns the detector and its history."""
    cfg.validate()
    det = ToyDetector.create(cfg) if det is None else det
    opt = SGD(det.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    history: list[HistoryRow] = []
    for step in range(cfg.steps):
        opt.lr = poly_lr(cfg.lr, step, cfg.steps, cfg.lr_power)
        scenes = [generate_scene(scene_seed(cfg.seed, step * cfg.batch_size + b)) for b in range(cfg.batch_size)]
        total, l_app, l_loc, s = train_step_loss(det, scenes)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(total)
        clip_grad_norm(opt.params, cfg.grad_clip)
        opt.step()
        row = HistoryRow(step, l_app.item(), l_loc.item(),
                         s.s_app.item() if s else math.nan, s.s_loc.item() if s else math.nan, value)
        history.append(row)
        if callback:
            callback(row)
    return det, history


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class Detection:
    label: KittiObjectLabel
    category_probs: np.ndarray


def predict(det: ToyDetector, scene: SyntheticScene, cell: tuple[int, int] | None = None) -> Detection:
    with no_grad():
        fwd = forward(det, scene, cell)
        probs = softmax(fwd.preds.logits).data
    p = fwd.preds
    cat = int(np.argmax(probs[:N_CLASSES]))
    w, h, l = (float(v) for v in p.dims.data)
    x, y, z = (float(v) for v in p.center3d.data)
    ry = wrap_angle(float(p.rot.data))
    box = tuple(float(v) for v in p.box2d.data)
    label = KittiObjectLabel(
        category=CATEGORY_NAMES[cat], truncation=0.0, occlusion=0,
        alpha=wrap_angle(ry - math.atan2(x, z)), box2d=box,
        dims=(max(h, 1e-3), max(w, 1e-3), max(l, 1e-3)), location=(x, y, z), rotation_y=ry,
        score=float(probs[cat]),
    )
    return Detection(label, probs)


@dataclass
class EvalResult:
    ap: dict[str, float]  # "<metric>/<category>" -> AP
    accuracy: float
    n_scenes: int

    @property
    def car_ap3d(self) -> float:
        return self.ap["3d/Car"]


def evaluate_detector(det: ToyDetector, n_scenes: int = 200, iou: float = 0.5, mode: str = "R40",
                      nms_iou: float = 0.4, score_thresh: float = 0.75) -> EvalResult:
    """AP on held-out scenes, reading the heads at the ground-truth centre cell."""
    gt, dets = {}, {}
    correct = 0
    for i, seed in enumerate(heldout_seeds(n_scenes)):
        scene = generate_scene(seed)
        d = predict(det, scene)
        correct += int(np.argmax(d.category_probs[:N_CLASSES]) == scene.category)
        keep = nms_2d([d.label.box2d], [d.label.score], nms_iou, score_thresh)
        key = f"{i:06d}"
        gt[key] = [scene.label()]
        dets[key] = [d.label for _ in keep]
    ap = {}
    for metric in ("3d", "bev"):
        for name in CATEGORY_NAMES:
            has_gt = any(lb.category == name for labels in gt.values() for lb in labels)
            # a small held-out set can miss a category entirely; its AP is then undefined
            ap[f"{metric}/{name}"] = (evaluate_category(gt, dets, name, None, iou, metric, mode)
                                      if has_gt else math.nan)
    return EvalResult(ap, correct / n_scenes, n_scenes)


# ---------------------------------------------------------------------------
# ablations

TABLE4 = {
    "I": dict(use_alfr=False, use_dit=False),
    "II": dict(use_alfr=True, self_reflect=True, alfr_flow="none", use_dit=False),
    "III": dict(use_alfr=True, self_reflect=False, alfr_flow="both", use_dit=False),
    "IV": dict(use_alfr=True, self_reflect=True, alfr_flow="both", use_dit=False),
    "V": dict(use_alfr=True, self_reflect=True, alfr_flow="none", use_dit=True),
    "VI": dict(use_alfr=True, self_reflect=False, alfr_flow="both", use_dit=True),
    "VII": dict(use_alfr=True, self_reflect=True, alfr_flow="both", use_dit=True),
}
TABLE5 = {
    "rot+whl->loc": dict(rot_stream="localization", whl_stream="localization"),
    "rot->loc": dict(rot_stream="localization", whl_stream="appearance"),
    "whl->loc": dict(rot_stream="appearance", whl_stream="localization"),
    "rot+whl->app": dict(rot_stream="appearance", whl_stream="appearance"),
}
TABLE6 = {
    "none": dict(alfr_flow="none"),
    "app_to_loc": dict(alfr_flow="app_to_loc"),
    "loc_to_app": dict(alfr_flow="loc_to_app"),
    "both": dict(alfr_flow="both"),
}
TABLE7 = {
    "none": dict(use_dit=False),
    "init": dict(dit_variant="init"),
    "cross": dict(dit_variant="cross"),
    "shared": dict(dit_variant="shared"),
    "learned": dict(dit_variant="learned"),
}
ABLATIONS = {"table4": TABLE4, "table5": TABLE5, "table6": TABLE6, "table7": TABLE7}


@dataclass
class AblationRow:
    name: str
    overrides: dict
    per_seed: list[float]
    accuracy: list[float]
    s_app: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed))


@dataclass
class AblationTable:
    metric: str
    seeds: list[int]
    rows: list[AblationRow]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def ablate(base_cfg: TrainConfig, variants: dict[str, dict], seeds: Sequence[int] = (0, 1, 2, 3, 4),
           n_eval: int = 200, iou: float = 0.5, score_thresh: float = 0.75,
           log: Callable[[str], None] | None = None) -> AblationTable:
    """Train every variant for every seed and report held-out Car AP_3D (R40)."""
    rows = []
    for name, overrides in variants.items():
        aps, accs, s_apps = [], [], []
        for seed in seeds:
            cfg = replace(base_cfg, seed=int(seed), **overrides).validate()
            t0 = time.perf_counter()
            det, hist = train(cfg)
            res = evaluate_detector(det, n_eval, iou, score_thresh=score_thresh)
            aps.append(res.car_ap3d)
            accs.append(res.accuracy)
            tail = [h.s_app for h in hist[-max(1, len(hist) // 10):]]
            s_apps.append(float(np.mean(tail)))
            if log:
                log(f"{name} seed={seed} AP3D(Car)={res.car_ap3d:.4f} acc={res.accuracy:.3f} "
                    f"({time.perf_counter() - t0:.1f}s)")
        rows.append(AblationRow(name, dict(overrides), aps, accs, s_apps))
    return AblationTable("AP_3D Car R40 @ IoU %.2f" % iou, [int(s) for s in seeds], rows)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
