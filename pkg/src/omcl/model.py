"""Backbones, the cosine head and the open-set loss terms.

Class indices are 0-based: known classes are ``0..C-1`` and the implicit
unknown channel (carried by the fixed threshold logit) is index ``C``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCALE_FLOOR = 1.0
DESCRIPTOR_MODES = ("cube-project", "sphere-uniform")
SCORING_MODES = ("threshold-channel", "plain")


class NumericalError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


# ---------------------------------------------------------------------------
# backbones


@dataclass
class BackboneSpec:
    arch: str = "mlp"                      # "mlp" | "small-cnn"
    input_shape: tuple[int, ...] = (2,)
    widths: tuple[int, ...] = (64, 64)     # hidden widths (mlp) or conv channels (small-cnn)
    d: int = 128

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if self.arch not in ("mlp", "small-cnn"):
            raise ValueError(f"unknown backbone architecture {self.arch!r}")
        if self.d < 1:
            raise ValueError("embedding dimension must be positive")
        if self.arch == "small-cnn" and (len(self.input_shape) != 3 or len(self.widths) != 2):
            raise ValueError("small-cnn needs input_shape (H, W, ch) and two channel counts")


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Backbone:
    """Maps inputs to d-dimensional embeddings.

    ``mlp``: flatten -> [linear -> relu]* -> linear(d).
    ``small-cnn``: conv3x3 -> relu -> maxpool2 -> conv3x3 -> relu -> maxpool2
    -> flatten -> linear(d).  Biases start at zero.
    """

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        if spec.arch == "mlp":
            width_in = int(np.prod(spec.input_shape))
            for i, width in enumerate((*spec.widths, spec.d)):
                self._add(f"fc{i}.weight", _uniform(rng, width_in, (width_in, width)))
                self._add(f"fc{i}.bias", np.zeros(width))
                width_in = width
        else:
            h, w, ch = spec.input_shape
            c1, c2 = spec.widths
            self._add("conv0.weight", _uniform(rng, 9 * ch, (3, 3, ch, c1)))
            self._add("conv0.bias", np.zeros(c1))
            self._add("conv1.weight", _uniform(rng, 9 * c1, (3, 3, c1, c2)))
            self._add("conv1.bias", np.zeros(c2))
            flat = (h // 2 // 2) * (w // 2 // 2) * c2
            self._add("fc.weight", _uniform(rng, flat, (flat, spec.d)))
            self._add("fc.bias", np.zeros(spec.d))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def __call__(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if data.shape[1:] != self.spec.input_shape:
            raise ad.ShapeError("embed", data.shape, ("B", *self.spec.input_shape))
        p = self.params
        if self.spec.arch == "mlp":
            h = Tensor(data.reshape(len(data), int(np.prod(self.spec.input_shape))))
            n_layers = len(self.spec.widths) + 1
            for i in range(n_layers):
                h = h @ p[f"fc{i}.weight"] + p[f"fc{i}.bias"]
                if i < n_layers - 1:
                    h = ad.relu(h)
            return h
        h = ad.maxpool2d(ad.relu(ad.conv2d(Tensor(data), p["conv0.weight"], p["conv0.bias"])))
        h = ad.maxpool2d(ad.relu(ad.conv2d(h, p["conv1.weight"], p["conv1.bias"])))
        h = ad.reshape(h, (len(data), -1))
        return h @ p["fc.weight"] + p["fc.bias"]


# ---------------------------------------------------------------------------
# cosine head


@dataclass
class CosineHead:
    """Last layer: class directions ``W`` (C×d), learnable scale ``s``.

    ``m``, ``t`` and ``lam`` are constants.  No weights exist for the
    unknown channel; its logit is always ``s * t``.
    """

    W: Tensor
    s: Tensor
    m: float = -0.1
    t: float = 0.1
    lam: float = 0.5

    @classmethod
    def create(cls, n_classes: int, d: int, rng: np.random.Generator, s0: float = 16.0,
               m: float = -0.1, t: float = 0.1, lam: float = 0.5) -> "CosineHead":
        if s0 <= 0:
            raise ValueError("scale must be positive")
        W = Tensor(rng.standard_normal((n_classes, d)) / np.sqrt(d), requires_grad=True, name="head.W")
        s = Tensor(float(s0), requires_grad=True, name="head.s")
        return cls(W, s, m, t, lam)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def scale(self) -> float:
        return float(self.s.data)

    def clamp_scale(self, floor: float = SCALE_FLOOR) -> None:
        if self.s.data < floor:
            self.s.data = np.asarray(float(floor))


def cosine(z, W, strict: bool = False) -> Tensor:
    """cos(angle) between every row of ``z`` and every row of ``W``, B×C."""
    z, W = ad.as_tensor(z), ad.as_tensor(W)
    if z.data.ndim != 2 or W.data.ndim != 2 or z.shape[1] != W.shape[1]:
        raise ad.ShapeError("cosine", z.shape, W.shape)
    return ad.l2_normalize(z, strict=strict) @ ad.transpose(ad.l2_normalize(W, strict=strict))


def cosine_logits(z, head: CosineHead, strict: bool = False) -> Tensor:
    return head.s * cosine(z, head.W, strict=strict)


def _threshold_column(s: Tensor, t: float, rows: int) -> Tensor:
    return ad.reshape(s, (1, 1)) * np.full((rows, 1), float(t))


def log_prob_cos(cos: Tensor, labels, s) -> Tensor:
    """log of the plain cosine softmax probability of each row's label."""
    return ad.pick(ad.log_softmax(ad.as_tensor(s) * cos, axis=1), labels)


def log_prob_mlas(cos: Tensor, labels, s, m: float, t: float, threshold: bool = True) -> Tensor:
    """log of the margin probability: the true-class cosine is lowered by ``m``
    and the threshold logit ``s*t`` joins the denominator."""
    cos, s = ad.as_tensor(cos), ad.as_tensor(s)
    labels = np.asarray(labels, dtype=np.intp)
    shift = np.zeros(cos.shape)
    shift[np.arange(len(labels)), labels] = m
    logits = s * (cos - shift)
    if threshold:
        logits = ad.concat([logits, _threshold_column(s, t, cos.shape[0])], axis=1)
    return ad.pick(ad.log_softmax(logits, axis=1), labels)


def log_prob_oss(cos: Tensor, s, t: float) -> Tensor:
    """log of the unknown-channel probability ``e^{st} / (e^{st} + sum_j e^{s cos_j})``."""
    cos, s = ad.as_tensor(cos), ad.as_tensor(s)
    logits = ad.concat([_threshold_column(s, t, cos.shape[0]), s * cos], axis=1)
    return ad.pick(ad.log_softmax(logits, axis=1), np.zeros(cos.shape[0], dtype=np.intp))


def _rows(cos_row):
    cos = np.asarray(cos_row, dtype=np.float64)
    return cos.reshape(1, -1) if cos.ndim == 1 else cos, cos.ndim == 1


def _labels(y, n):
    return np.broadcast_to(np.asarray(y, dtype=np.intp), (n,))


def cos_prob(cos_row, y, s: float):
    cos, single = _rows(cos_row)
    out = np.exp(log_prob_cos(Tensor(cos), _labels(y, len(cos)), s).data)
    return float(out[0]) if single else out


def mlas_prob(cos_row, y, s: float, m: float, t: float, threshold: bool = True):
    cos, single = _rows(cos_row)
    out = np.exp(log_prob_mlas(Tensor(cos), _labels(y, len(cos)), s, m, t, threshold).data)
    return float(out[0]) if single else out


def oss_prob(cos_row, s: float, t: float):
    cos, single = _rows(cos_row)
    out = np.exp(log_prob_oss(Tensor(cos), s, t).data)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# descriptors


@dataclass
class DescriptorBatch:
    z: np.ndarray
    scale: float
    label: int | None = None   # index of the unknown channel, i.e. C
    mode: str = "cube-project"

    def __len__(self) -> int:
        return len(self.z)


def sample_descriptors(M: int, d: int, s: float, rng: np.random.Generator,
                       mode: str = "cube-project", label: int | None = None) -> DescriptorBatch:
    """Draw ``M`` pseudo-unknown features on the sphere of radius ``s``.

    ``cube-project`` draws each coordinate uniformly from ``[-s, s]``,
    redraws rows shorter than 1e-9 and rescales to norm ``s``.
    ``sphere-uniform`` normalizes standard Gaussian draws instead.
    """
    if M < 0 or d < 1 or s <= 0:
        raise ValueError(f"sample_descriptors: invalid M={M}, d={d}, s={s}")
    if mode not in DESCRIPTOR_MODES:
        raise ValueError(f"unknown descriptor mode {mode!r}")
    draw = (lambda n: rng.uniform(-s, s, size=(n, d))) if mode == "cube-project" \
        else (lambda n: rng.standard_normal((n, d)))
    z = draw(M)
    norms = np.linalg.norm(z, axis=1)
    short = norms < 1e-9
    while short.any():
        z[short] = draw(int(short.sum()))
        norms = np.linalg.norm(z, axis=1)
        short = norms < 1e-9
    z = (z / norms[:, None]) * s
    return DescriptorBatch(z, float(s), label, mode)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossResult:
    loss: Tensor
    parts: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.loss.data)


def omcl_loss(z: Tensor, labels, descriptors, head: CosineHead,
              enable_mlas: bool = True, enable_oss: bool = True) -> LossResult:
    """Open margin cosine loss over a training batch plus descriptor rows.

    ``-1/(N+M) * [sum_train (log S_cos + lam log S_MLAS) + lam sum_desc log S_OSS]``.
    Descriptors join at the head input, so their gradient reaches ``W`` and
    ``s`` only.  With both mechanisms disabled this is cosine cross-entropy.
    """
    z = ad.as_tensor(z)
    labels = np.asarray(labels, dtype=np.intp)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ad.ShapeError("omcl_loss", z.shape, labels.shape)
    desc = None
    if enable_oss and descriptors is not None:
        desc = descriptors.z if isinstance(descriptors, DescriptorBatch) else np.asarray(descriptors)
        if desc.ndim != 2 or desc.shape[1] != z.shape[1]:
            raise ad.ShapeError("omcl_loss", z.shape, desc.shape)
        if len(desc) == 0:
            desc = None
    n = z.shape[0]
    m_count = 0 if desc is None else len(desc)
    if n + m_count == 0:
        raise ad.ShapeError("omcl_loss", z.shape)

    features = z if desc is None else ad.concat_rows([z, Tensor(desc)])
    cos = cosine(features, head.W)
    parts = {}
    total = None
    if n:
        cos_train = cos if desc is None else ad.slice_rows(cos, 0, n)
        lp_cos = log_prob_cos(cos_train, labels, head.s)
        total = ad.sum(lp_cos)
        parts["cos"] = -float(lp_cos.data.mean())
        if enable_mlas:
            lp_mlas = log_prob_mlas(cos_train, labels, head.s, head.m, head.t)
            total = total + head.lam * ad.sum(lp_mlas)
            parts["mlas"] = -float(lp_mlas.data.mean())
    if desc is not None:
        lp_oss = log_prob_oss(ad.slice_rows(cos, n, n + m_count), head.s, head.t)
        term = head.lam * ad.sum(lp_oss)
        total = term if total is None else total + term
        parts["oss"] = -float(lp_oss.data.mean())
    loss = total * (-1.0 / (n + m_count))
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss (N={n}, M={m_count}, s={head.scale}, parts={parts})")
    return LossResult(loss, parts)


# ---------------------------------------------------------------------------
# full model


class OSRModel:
    def __init__(self, backbone: Backbone, head: CosineHead):
        self.backbone = backbone
        self.head = head

    @classmethod
    def create(cls, spec: BackboneSpec, n_classes: int, rng: np.random.Generator,
               s0: float = 16.0, m: float = -0.1, t: float = 0.1, lam: float = 0.5) -> "OSRModel":
        backbone = Backbone(spec, rng)
        head = CosineHead.create(n_classes, spec.d, rng, s0=s0, m=m, t=t, lam=lam)
        return cls(backbone, head)

    @property
    def spec(self) -> BackboneSpec:
        return self.backbone.spec

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.params, "head.W": self.head.W, "head.s": self.head.s}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def count_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def embed(self, x) -> Tensor:
        return self.backbone(x)

    def embed_numpy(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return np.zeros((0, self.spec.d))
        return np.concatenate([self.embed(x[i:i + batch_size]).data
                               for i in range(0, len(x), batch_size)])

    def predict(self, x, scoring: str = "threshold-channel", batch_size: int = 512):
        return predict_embeddings(self.embed_numpy(x, batch_size), self.head, scoring)


def predict_embeddings(z, head: CosineHead, scoring: str = "threshold-channel"):
    """Return ``(classes, known_scores)``.

    The score is the largest known-class probability; with
    ``threshold-channel`` the softmax denominator includes ``e^{s t}``.
    Ties go to the lowest class index.
    """
    if scoring not in SCORING_MODES:
        raise ValueError(f"unknown scoring mode {scoring!r}")
    z = np.asarray(z, dtype=np.float64)
    logits = head.scale * cosine(z, head.W.data).data
    if scoring == "threshold-channel":
        probs = ad.softmax_with_extra_logit(logits, head.scale * head.t).data[:, :-1]
    else:
        probs = ad.softmax(logits, axis=1).data
    classes = probs.argmax(axis=1)
    return classes, probs[np.arange(len(probs)), classes]


# ---------------------------------------------------------------------------
# checkpoint file
#
# offset 0   4 bytes   magic b"OMCL"
# offset 4   uint16 LE format version
# offset 6   uint16 LE length of the architecture tag
# offset 8   uint32 LE length L of the JSON header
# offset 12  architecture tag (ASCII), then L bytes UTF-8 JSON header:
#            backbone spec, C, s, m, t, lam, parameter table
#            [{name, shape}], rng state and free-form metadata
# then       float64 little-endian payload of each parameter in table order

MAGIC = b"OMCL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: OSRModel, rng_state: dict | None = None,
                    metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    params = model.named_parameters()
    header = {
        "backbone": {**asdict(model.spec)},
        "n_classes": model.head.n_classes,
        "s": model.head.scale,
        "m": model.head.m,
        "t": model.head.t,
        "lam": model.head.lam,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "rng_state": rng_state,
        "metadata": metadata or {},
    }
    arch = model.spec.arch.encode("ascii")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHI", FORMAT_VERSION, len(arch), len(blob)))
        fh.write(arch)
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[OSRModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an OMCL checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, arch_len, blob_len = struct.unpack("<HHI", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12 + arch_len
    arch = raw[12:pos].decode("ascii")
    header = json.loads(raw[pos:pos + blob_len].decode("utf-8"))
    pos += blob_len
    spec = BackboneSpec(**header["backbone"])
    if spec.arch != arch:
        raise CheckpointError(f"{path}: architecture tag {arch!r} disagrees with header")
    model = OSRModel.create(spec, header["n_classes"], np.random.default_rng(0), s0=header["s"],
                            m=header["m"], t=header["t"], lam=header["lam"])
    params = model.named_parameters()
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[pos:pos + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        params[entry["name"]].data = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        pos += 8 * count
    return model, header


# ---------------------------------------------------------------------------
# gradient verification of the loss terms


def loss_gradcheck_suite(n_configs: int = 20, seed: int = 0, step: float = 1e-4,
                         tolerance: float = 1e-4) -> dict[str, float]:
    """Largest relative gradient error of each loss term over random heads.

    Draws C in 2..8, d in 2..16, m in [-0.3, 0.3], t in [-0.5, 0.5] and
    s in [1, 32]; differentiates with respect to embeddings, W and s.
    """
    rng = np.random.default_rng(seed)
    worst = {"cos": 0.0, "mlas": 0.0, "oss": 0.0, "omcl": 0.0}
    for _ in range(n_configs):
        C, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        m, t, s0 = rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5), rng.uniform(1, 32)
        n, n_desc = 6, 5
        z0 = rng.standard_normal((n, d))
        W0 = rng.standard_normal((C, d))
        labels = rng.integers(0, C, n)
        desc = sample_descriptors(n_desc, d, s0, rng, label=C)
        terms = {
            "cos": lambda z, W, s: -ad.mean(log_prob_cos(cosine(z, W), labels, s)),
            "mlas": lambda z, W, s: -ad.mean(log_prob_mlas(cosine(z, W), labels, s, m, t)),
            "oss": lambda z, W, s: -ad.mean(log_prob_oss(cosine(z, W), s, t)),
            "omcl": lambda z, W, s: omcl_loss(z, labels, desc, CosineHead(W, s, m, t, 0.5)).loss,
        }
        for name, f in terms.items():
            inputs = [Tensor(z0.copy()), Tensor(W0.copy()), Tensor(s0)]
            report = ad.gradcheck(f, inputs, step=step, tolerance=tolerance)
            worst[name] = max(worst[name], report.max_rel_error)
    return worst
