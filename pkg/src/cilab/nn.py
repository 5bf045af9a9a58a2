"""A small deterministic MLP engine with activation taps and manual backprop.

Models are ``Model(extractor, head)``. Extractors are either a single
``FeatureExtractor`` chain or a ``BranchedExtractor`` (optional shared
stem plus parallel branches whose outputs are concatenated). Heads are
linear, cosine, or a ``ConcatHead`` of per-stage heads.

Parameters are addressed by dotted keys such as
``extractor.stage2.fc1.weight`` or ``head.weight``; gradients use the same
keys. Frozen components produce no gradient entries.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArtifactIOError,
    DimensionError,
    IntegrityError,
    NormalizationError,
    ParameterError,
    ProtocolError,
)
from .numeric import RngStream, as_matrix
from .repsim.cka import LayerTapSet

DEFAULT_COSINE_SCALE = 24.0
CHECKPOINT_FORMAT = "cilab-ckpt/1"

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _uniform_init(rng: RngStream, d_out: int, d_in: int, gain: float = 1.0):
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-gain * bound, gain * bound, size=(d_out, d_in))
    b = rng.uniform(-bound, bound, size=d_out)
    return w, b


def _digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(params):
        a = np.ascontiguousarray(params[key])
        h.update(key.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# feature extractors


@dataclass
class Affine:
    name: str
    stage: int
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    relu: bool = True

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


class FeatureExtractor:
    """A chain of affine layers grouped into numbered stages.

    Every layer's ReLU output is tapped under the layer name. If the last
    layer is linear (the usual case for a full extractor) its raw output
    is the feature vector and is tapped again as ``features``.
    """

    def __init__(self, layers: Sequence[Affine], frozen: bool = False, param_version: int = 0):
        layers = list(layers)
        if not layers:
            raise DimensionError("an extractor needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.d_out != b.d_in:
                raise DimensionError(f"{a.name} outputs {a.d_out} but {b.name} expects {b.d_in}")
        self.layers = layers
        self.frozen = frozen
        self.param_version = param_version

    @classmethod
    def build(
        cls,
        in_dim: int,
        rng: RngStream,
        num_stages: int = 4,
        width: int = 64,
        feature_dim: int = 32,
        layers_per_stage: int = 2,
        init_gain: float = 1.0,
    ) -> "FeatureExtractor":
        layers = []
        d = in_dim
        total = num_stages * layers_per_stage
        for s in range(num_stages):
            for j in range(layers_per_stage):
                last = len(layers) == total - 1
                d_out = feature_dim if last else width
                name = f"stage{s + 1}.fc{j + 1}"
                w, b = _uniform_init(rng.derive(name), d_out, d, init_gain)
                layers.append(Affine(name, s, w, b, relu=not last))
                d = d_out
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def stages(self) -> list[int]:
        return sorted({layer.stage for layer in self.layers})

    @property
    def tap_ids(self) -> list[str]:
        ids = [layer.name for layer in self.layers]
        if not self.layers[-1].relu:
            ids.append("features")
        return ids

    def _check_input(self, x) -> np.ndarray:
        x = as_matrix(x, "batch")
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"batch has {x.shape[1]} columns, extractor expects {self.in_dim}")
        return x

    def forward_cached(self, x):
        x = self._check_input(x)
        cache = []
        taps = []
        h = x
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            act = np.maximum(pre, 0.0)
            cache.append((h, pre))
            taps.append(act)
            h = act if layer.relu else pre
        if not self.layers[-1].relu:
            taps.append(h)
        return h, cache, taps

    def forward(self, x) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_with_taps(self, x):
        out, _, taps = self.forward_cached(x)
        return out, LayerTapSet(self.tap_ids, taps)

    def backward(self, cache, dout: np.ndarray, need_input_grad: bool = False):
        """Return ``(grads, d_input)``; ``grads`` is empty when frozen."""
        grads = {}
        if self.frozen and not need_input_grad:
            return grads, None
        g = dout
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, pre = cache[i]
            if layer.relu:
                g = g * (pre > 0)
            if not self.frozen:
                grads[f"{layer.name}.weight"] = g.T @ h
                grads[f"{layer.name}.bias"] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ layer.weight
        return grads, (g if need_input_grad else None)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {} if self.frozen else self.named_parameters()

    def macs(self) -> int:
        return sum(layer.d_in * layer.d_out for layer in self.layers)

    def digest(self) -> str:
        return _digest(self.named_parameters())

    def copy(self) -> "FeatureExtractor":
        return copy.deepcopy(self)

    def split(self, stage: int) -> tuple["FeatureExtractor | None", "FeatureExtractor"]:
        """Cut before the first layer of ``stage``: ``(lower, upper)`` deep copies."""
        if stage not in self.stages:
            raise ParameterError(f"no stage {stage}; stages are {self.stages}")
        lower = [copy.deepcopy(layer) for layer in self.layers if layer.stage < stage]
        upper = [copy.deepcopy(layer) for layer in self.layers if layer.stage >= stage]
        low = FeatureExtractor(lower, self.frozen, self.param_version) if lower else None
        return low, FeatureExtractor(upper, self.frozen, self.param_version)

    def fresh_like(self, rng: RngStream, init_gain: float = 1.0) -> "FeatureExtractor":
        layers = []
        for layer in self.layers:
            w, b = _uniform_init(rng.derive(layer.name), layer.d_out, layer.d_in, init_gain)
            layers.append(Affine(layer.name, layer.stage, w, b, layer.relu))
        return FeatureExtractor(layers)

    def structure(self) -> dict:
        return {
            "type": "chain",
            "frozen": self.frozen,
            "param_version": self.param_version,
            "layers": [
                {"name": l.name, "stage": l.stage, "relu": l.relu, "d_in": l.d_in, "d_out": l.d_out}
                for l in self.layers
            ],
        }


class BranchedExtractor:
    """Optional shared stem feeding parallel branches; outputs concatenated.

    DER is ``stem=None`` with one full branch per stage; partial DER keeps
    the lower stages as a frozen stem and replicates only the upper ones.
    """

    def __init__(self, stem: FeatureExtractor | None, branches: Sequence[FeatureExtractor]):
        branches = list(branches)
        if not branches:
            raise DimensionError("need at least one branch")
        d = stem.out_dim if stem is not None else branches[0].in_dim
        for k, br in enumerate(branches):
            if br.in_dim != d:
                raise DimensionError(f"branch {k} expects {br.in_dim} inputs, stem gives {d}")
        self.stem = stem
        self.branches = branches

    @property
    def in_dim(self) -> int:
        return self.stem.in_dim if self.stem is not None else self.branches[0].in_dim

    @property
    def out_dim(self) -> int:
        return sum(b.out_dim for b in self.branches)

    @property
    def branch_dim(self) -> int:
        return self.branches[0].out_dim

    @property
    def frozen(self) -> bool:
        parts = ([self.stem] if self.stem is not None else []) + self.branches
        return all(p.frozen for p in parts)

    @property
    def param_version(self) -> int:
        parts = ([self.stem] if self.stem is not None else []) + self.branches
        return sum(p.param_version for p in parts)

    def _parts(self):
        if self.stem is not None:
            yield "stem", self.stem
        for k, br in enumerate(self.branches):
            yield f"branch{k}", br

    def forward_cached(self, x):
        taps = []
        if self.stem is not None:
            h, stem_cache, stem_taps = self.stem.forward_cached(x)
            taps.extend(stem_taps)
        else:
            h, stem_cache = x, None
        outs, caches = [], []
        for br in self.branches:
            o, c, t = br.forward_cached(h)
            outs.append(o)
            caches.append(c)
            taps.extend(t)
        return np.concatenate(outs, axis=1), (stem_cache, caches), taps

    def forward(self, x) -> np.ndarray:
        return self.forward_cached(x)[0]

    @property
    def tap_ids(self) -> list[str]:
        ids = list(self.stem.tap_ids) if self.stem is not None else []
        for k, br in enumerate(self.branches):
            ids.extend(f"branch{k}/{t}" for t in br.tap_ids)
        return ids

    def forward_with_taps(self, x):
        out, _, taps = self.forward_cached(x)
        return out, LayerTapSet(self.tap_ids, taps)

    def path(self, branch: int) -> FeatureExtractor:
        """Stem plus one branch as a single chain (shares no arrays)."""
        layers = []
        if self.stem is not None:
            layers.extend(copy.deepcopy(self.stem.layers))
        layers.extend(copy.deepcopy(self.branches[branch].layers))
        return FeatureExtractor(layers, frozen=True)

    def backward(self, cache, dout: np.ndarray, need_input_grad: bool = False):
        stem_cache, caches = cache
        grads = {}
        stem_trainable = self.stem is not None and not self.stem.frozen
        need_h = stem_trainable or need_input_grad
        dh = None
        col = 0
        for k, (br, c) in enumerate(zip(self.branches, caches)):
            d = dout[:, col:col + br.out_dim]
            col += br.out_dim
            g, dx = br.backward(c, d, need_input_grad=need_h)
            grads.update({f"branch{k}.{key}": v for key, v in g.items()})
            if need_h:
                dh = dx if dh is None else dh + dx
        if self.stem is None:
            return grads, dh
        if not need_h:
            return grads, None
        g, dx = self.stem.backward(stem_cache, dh, need_input_grad)
        grads.update({f"stem.{key}": v for key, v in g.items()})
        return grads, dx

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in self._parts():
            out.update({f"{prefix}.{k}": v for k, v in part.named_parameters().items()})
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in self._parts():
            out.update({f"{prefix}.{k}": v for k, v in part.trainable_parameters().items()})
        return out

    def owner(self, key: str):
        prefix = key.split(".", 1)[0]
        return dict(self._parts())[prefix]

    def macs(self) -> int:
        return sum(part.macs() for _, part in self._parts())

    def digest(self) -> str:
        return _digest(self.named_parameters())

    def copy(self) -> "BranchedExtractor":
        return copy.deepcopy(self)

    def structure(self) -> dict:
        return {
            "type": "branched",
            "stem": self.stem.structure() if self.stem is not None else None,
            "branches": [b.structure() for b in self.branches],
        }


# --------------------------------------------------------------------------
# classifier heads


class LinearClassifier:
    """Logits ``W x + b`` (bias optional)."""

    def __init__(self, weight, bias=None, frozen: bool = False, param_version: int = 0):
        self.weight = as_matrix(weight, "weight")
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64).copy()
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("bias length must equal the class count")
        self.frozen = frozen
        self.param_version = param_version

    @classmethod
    def build(cls, num_classes: int, in_dim: int, rng: RngStream, bias: bool = True):
        w, b = _uniform_init(rng, num_classes, in_dim)
        return cls(w, b if bias else None)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def _check(self, f):
        f = as_matrix(f, "features")
        if f.shape[1] != self.in_dim:
            raise DimensionError(f"features have {f.shape[1]} columns, head expects {self.in_dim}")
        return f

    def forward_cached(self, f):
        f = self._check(f)
        out = f @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out, f

    def logits(self, f) -> np.ndarray:
        return self.forward_cached(f)[0]

    def backward(self, f, dlogits):
        grads = {}
        if not self.frozen:
            grads["weight"] = dlogits.T @ f
            if self.bias is not None:
                grads["bias"] = dlogits.sum(axis=0)
        return grads, dlogits @ self.weight

    def named_parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def trainable_parameters(self):
        return {} if self.frozen else self.named_parameters()

    def grow(self, new_classes: int, in_dim: int, rng: RngStream) -> "LinearClassifier":
        """Copy with extra class rows and/or wider input; old block kept."""
        w, b = _uniform_init(rng, self.num_classes + new_classes, in_dim)
        w[: self.num_classes, : self.in_dim] = self.weight
        if self.bias is not None:
            b[: self.num_classes] = self.bias
        return LinearClassifier(w, b if self.bias is not None else None)

    def macs(self) -> int:
        return self.num_classes * self.in_dim

    def structure(self) -> dict:
        return {"type": "linear", "bias": self.bias is not None, "frozen": self.frozen,
                "param_version": self.param_version}


class CosineClassifier:
    """Logits ``s * <W_i, x> / (|W_i| |x|)``; the scale can be fixed or learnt."""

    def __init__(self, weight, scale: float = DEFAULT_COSINE_SCALE, learnable_scale: bool = False,
                 frozen: bool = False, param_version: int = 0):
        self.weight = as_matrix(weight, "weight")
        self.scale = np.array([float(scale)])
        self.learnable_scale = learnable_scale
        self.frozen = frozen
        self.param_version = param_version

    @classmethod
    def build(cls, num_classes: int, in_dim: int, rng: RngStream,
              scale: float = DEFAULT_COSINE_SCALE, learnable_scale: bool = False):
        w, _ = _uniform_init(rng, num_classes, in_dim)
        return cls(w, scale, learnable_scale)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def forward_cached(self, f):
        f = as_matrix(f, "features")
        if f.shape[1] != self.in_dim:
            raise DimensionError(f"features have {f.shape[1]} columns, head expects {self.in_dim}")
        fn = np.sqrt(np.sum(f * f, axis=1, keepdims=True))
        wn = np.sqrt(np.sum(self.weight * self.weight, axis=1, keepdims=True))
        if np.any(fn == 0):
            raise NormalizationError("zero-norm feature row under a cosine head")
        if np.any(wn == 0):
            raise NormalizationError("zero-norm weight row under a cosine head")
        u = f / fn
        v = self.weight / wn
        cos = u @ v.T
        return self.scale[0] * cos, (u, fn, v, wn, cos)

    def logits(self, f) -> np.ndarray:
        return self.forward_cached(f)[0]

    def backward(self, cache, dlogits):
        u, fn, v, wn, cos = cache
        s = self.scale[0]
        dcos = s * dlogits
        du = dcos @ v
        df = (du - u * np.sum(du * u, axis=1, keepdims=True)) / fn
        grads = {}
        if not self.frozen:
            dv = dcos.T @ u
            grads["weight"] = (dv - v * np.sum(dv * v, axis=1, keepdims=True)) / wn
            if self.learnable_scale:
                grads["scale"] = np.array([np.sum(dlogits * cos)])
        return grads, df

    def named_parameters(self):
        out = {"weight": self.weight}
        if self.learnable_scale:
            out["scale"] = self.scale
        return out

    def trainable_parameters(self):
        return {} if self.frozen else self.named_parameters()

    def grow(self, new_classes: int, in_dim: int, rng: RngStream) -> "CosineClassifier":
        w, _ = _uniform_init(rng, self.num_classes + new_classes, in_dim)
        w[: self.num_classes, : self.in_dim] = self.weight
        return CosineClassifier(w, self.scale[0], self.learnable_scale)

    def macs(self) -> int:
        return self.num_classes * self.in_dim

    def structure(self) -> dict:
        return {"type": "cosine", "scale": float(self.scale[0]), "learnable_scale": self.learnable_scale,
                "frozen": self.frozen, "param_version": self.param_version}


class ConcatHead:
    """Per-stage heads evaluated side by side; logits are concatenated."""

    def __init__(self, heads: Sequence):
        self.heads = list(heads)
        if not self.heads:
            raise DimensionError("ConcatHead needs at least one head")
        if len({h.in_dim for h in self.heads}) != 1:
            raise DimensionError("all sub-heads must share the input dimension")

    @property
    def num_classes(self) -> int:
        return sum(h.num_classes for h in self.heads)

    @property
    def in_dim(self) -> int:
        return self.heads[0].in_dim

    @property
    def frozen(self) -> bool:
        return all(h.frozen for h in self.heads)

    @property
    def param_version(self) -> int:
        return sum(h.param_version for h in self.heads)

    def forward_cached(self, f):
        outs, caches = zip(*(h.forward_cached(f) for h in self.heads))
        return np.concatenate(outs, axis=1), caches

    def logits(self, f) -> np.ndarray:
        return self.forward_cached(f)[0]

    def backward(self, caches, dlogits):
        grads = {}
        df = None
        col = 0
        for k, (h, c) in enumerate(zip(self.heads, caches)):
            d = dlogits[:, col:col + h.num_classes]
            col += h.num_classes
            if h.frozen and not np.any(d):
                continue
            g, dfk = h.backward(c, d)
            grads.update({f"{k}.{key}": v for key, v in g.items()})
            df = dfk if df is None else df + dfk
        if df is None:
            df = np.zeros((dlogits.shape[0], self.in_dim))
        return grads, df

    def named_parameters(self):
        out = {}
        for k, h in enumerate(self.heads):
            out.update({f"{k}.{key}": v for key, v in h.named_parameters().items()})
        return out

    def trainable_parameters(self):
        out = {}
        for k, h in enumerate(self.heads):
            out.update({f"{k}.{key}": v for key, v in h.trainable_parameters().items()})
        return out

    def owner(self, key: str):
        return self.heads[int(key.split(".", 1)[0])]

    def merged(self):
        """One head whose weight rows stack the sub-heads' rows."""
        first = self.heads[0]
        if isinstance(first, CosineClassifier):
            scales = {float(h.scale[0]) for h in self.heads}
            if len(scales) != 1 or not all(isinstance(h, CosineClassifier) for h in self.heads):
                raise ProtocolError("can only merge cosine heads with a common scale")
            return CosineClassifier(np.vstack([h.weight for h in self.heads]), scales.pop())
        if not all(isinstance(h, LinearClassifier) for h in self.heads):
            raise ProtocolError("cannot merge heads of mixed type")
        biases = [h.bias if h.bias is not None else np.zeros(h.num_classes) for h in self.heads]
        return LinearClassifier(np.vstack([h.weight for h in self.heads]), np.concatenate(biases))

    def macs(self) -> int:
        return sum(h.macs() for h in self.heads)

    def structure(self) -> dict:
        return {"type": "concat", "heads": [h.structure() for h in self.heads]}


def classify(head, features) -> np.ndarray:
    return head.logits(features)


# --------------------------------------------------------------------------
# model, losses, gradients


class Model:
    def __init__(self, extractor, head):
        if extractor.out_dim != head.in_dim:
            raise DimensionError(f"extractor gives {extractor.out_dim} features, head expects {head.in_dim}")
        self.extractor = extractor
        self.head = head

    def logits(self, x) -> np.ndarray:
        return self.head.logits(self.extractor.forward(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"extractor.{k}": v for k, v in self.extractor.named_parameters().items()}
        out.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        out = {f"extractor.{k}": v for k, v in self.extractor.trainable_parameters().items()}
        out.update({f"head.{k}": v for k, v in self.head.trainable_parameters().items()})
        return out

    def owner(self, key: str):
        part, rest = key.split(".", 1)
        comp = self.extractor if part == "extractor" else self.head
        return comp.owner(rest) if hasattr(comp, "owner") else comp

    def digest(self) -> str:
        return _digest(self.named_parameters())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def macs(self) -> int:
        return count_macs(self.extractor, [self.head])

    def structure(self) -> dict:
        return {"extractor": self.extractor.structure(), "head": self.head.structure()}


def forward_with_taps(extractor, batch):
    return extractor.forward_with_taps(batch)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy_masked(logits, labels, active_classes) -> tuple[float, np.ndarray]:
    """Mean CE with the softmax restricted to ``active_classes`` columns."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    active = np.asarray(sorted(set(int(c) for c in active_classes)), dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError("one label per logit row is required")
    if active.size == 0 or active.min() < 0 or active.max() >= logits.shape[1]:
        raise ProtocolError("active classes must index logit columns")
    pos = np.searchsorted(active, labels)
    pos = np.minimum(pos, active.size - 1)
    if np.any(active[pos] != labels):
        bad = sorted(set(labels[active[pos] != labels].tolist()))
        raise ProtocolError(f"labels {bad} are outside the active class set")
    sub = logits[:, active]
    logp = _log_softmax(sub)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, pos]))
    dsub = np.exp(logp)
    dsub[rows, pos] -= 1.0
    dsub /= n
    dlogits = np.zeros_like(logits)
    dlogits[:, active] = dsub
    return loss, dlogits


def cross_entropy(logits, labels):
    logits = as_matrix(logits, "logits")
    return cross_entropy_masked(logits, labels, range(logits.shape[1]))


def distill_loss(student_logits, teacher_logits, temperature: float = 2.0) -> tuple[float, np.ndarray]:
    """``T^2 * KL(softmax(t/T) || softmax(s/T))`` averaged over the batch."""
    if not temperature > 0:
        raise ParameterError("temperature must be positive")
    s = as_matrix(student_logits, "student_logits")
    t = as_matrix(teacher_logits, "teacher_logits")
    if s.shape != t.shape:
        raise DimensionError(f"logit shapes differ: {s.shape} vs {t.shape}")
    log_p = _log_softmax(t / temperature)
    log_q = _log_softmax(s / temperature)
    p = np.exp(log_p)
    n = s.shape[0]
    kl = np.sum(p * (log_p - log_q), axis=1)
    loss = temperature ** 2 * float(np.mean(kl))
    dlogits = temperature * (np.exp(log_q) - p) / n
    return loss, dlogits


GradientSet = dict


def backward(model: Model, batch, loss_fn: LossFn) -> tuple[float, GradientSet]:
    """Forward ``batch``, apply ``loss_fn(logits) -> (loss, dlogits)`` and backprop.

    Returns ``(loss, grads)``; ``grads`` has one entry per trainable
    parameter key and nothing for frozen parts.
    """
    feats, ext_cache, _ = model.extractor.forward_cached(batch)
    logits, head_cache = model.head.forward_cached(feats)
    loss, dlogits = loss_fn(logits)
    hgrads, dfeat = model.head.backward(head_cache, dlogits)
    grads = {f"head.{k}": v for k, v in hgrads.items()}
    egrads, _ = model.extractor.backward(ext_cache, dfeat)
    grads.update({f"extractor.{k}": v for k, v in egrads.items()})
    return loss, grads


def sgd_step(params: dict[str, np.ndarray], grads: GradientSet, lr: float, weight_decay: float = 0.0):
    """In place ``p <- p - lr * (g + weight_decay * p)`` for every key in ``grads``."""
    if lr < 0:
        raise ParameterError("learning rate must be non-negative")
    for key, g in grads.items():
        if key not in params:
            raise DimensionError(f"gradient for unknown parameter {key!r}")
        p = params[key]
        if p.shape != g.shape:
            raise DimensionError(f"{key}: parameter {p.shape} vs gradient {g.shape}")
        if weight_decay:
            p -= lr * (g + weight_decay * p)
        else:
            p -= lr * g
    return params


def apply_sgd(model: Model, grads: GradientSet, lr: float, weight_decay: float = 0.0):
    """``sgd_step`` on a model, bumping ``param_version`` of every touched component."""
    sgd_step(model.named_parameters(), grads, lr, weight_decay)
    _bump_owners(model.owner, grads)


def count_macs(extractor, heads: Sequence = ()) -> int:
    """Multiply-accumulates for one input: every affine layer plus heads."""
    return extractor.macs() + sum(h.macs() for h in heads)


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / max(total_steps, 1)) ** power


@dataclass
class Schedule:
    epochs: int
    lr: float = 0.1
    decay_power: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4


def fit(model: Model, x: np.ndarray, make_loss: Callable[[np.ndarray], LossFn],
        schedule: Schedule, rng: RngStream) -> list[float]:
    """Mini-batch SGD with polynomial LR decay.

    ``make_loss(idx)`` receives the row indices of the batch and returns
    the loss function for its logits. Returns per-epoch mean losses.
    """
    n = x.shape[0]
    per_epoch = -(-n // schedule.batch_size)
    total = per_epoch * schedule.epochs
    step = 0
    history = []
    for epoch in range(schedule.epochs):
        perm = rng.permutation(n)
        losses = []
        for j in range(per_epoch):
            idx = perm[j * schedule.batch_size:(j + 1) * schedule.batch_size]
            loss, grads = backward(model, x[idx], make_loss(idx))
            apply_sgd(model, grads, poly_lr(schedule.lr, step, total, schedule.decay_power),
                      schedule.weight_decay)
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


def _bump_owners(owner_of, keys):
    touched = {}
    for k in keys:
        comp = owner_of(k)
        touched[id(comp)] = comp
    for comp in touched.values():
        comp.param_version += 1


def fit_head(head, feats: np.ndarray, make_loss: Callable[[np.ndarray], LossFn],
             schedule: Schedule, rng: RngStream) -> list[float]:
    """``fit`` for a head on precomputed (frozen) features."""
    n = feats.shape[0]
    per_epoch = -(-n // schedule.batch_size)
    total = per_epoch * schedule.epochs
    owner_of = head.owner if hasattr(head, "owner") else (lambda _k: head)
    step = 0
    history = []
    for epoch in range(schedule.epochs):
        perm = rng.permutation(n)
        losses = []
        for j in range(per_epoch):
            idx = perm[j * schedule.batch_size:(j + 1) * schedule.batch_size]
            logits, cache = head.forward_cached(feats[idx])
            loss, dlogits = make_loss(idx)(logits)
            grads, _ = head.backward(cache, dlogits)
            sgd_step(head.named_parameters(), grads,
                     poly_lr(schedule.lr, step, total, schedule.decay_power), schedule.weight_decay)
            _bump_owners(owner_of, grads)
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


# --------------------------------------------------------------------------
# checkpoints


def _extractor_from(structure: dict, tensors: dict, prefix: str):
    if structure["type"] == "chain":
        layers = []
        for spec in structure["layers"]:
            w = tensors[f"{prefix}{spec['name']}.weight"]
            b = tensors[f"{prefix}{spec['name']}.bias"]
            layers.append(Affine(spec["name"], spec["stage"], w, b, spec["relu"]))
        return FeatureExtractor(layers, structure["frozen"], structure["param_version"])
    stem = None
    if structure["stem"] is not None:
        stem = _extractor_from(structure["stem"], tensors, f"{prefix}stem.")
    branches = [_extractor_from(s, tensors, f"{prefix}branch{k}.") for k, s in enumerate(structure["branches"])]
    return BranchedExtractor(stem, branches)


def _head_from(structure: dict, tensors: dict, prefix: str):
    kind = structure["type"]
    if kind == "linear":
        bias = tensors.get(f"{prefix}bias") if structure["bias"] else None
        return LinearClassifier(tensors[f"{prefix}weight"], bias, structure["frozen"], structure["param_version"])
    if kind == "cosine":
        scale = structure["scale"]
        if f"{prefix}scale" in tensors:
            scale = float(tensors[f"{prefix}scale"][0])
        return CosineClassifier(tensors[f"{prefix}weight"], scale, structure["learnable_scale"],
                                structure["frozen"], structure["param_version"])
    if kind == "concat":
        return ConcatHead([_head_from(s, tensors, f"{prefix}{k}.") for k, s in enumerate(structure["heads"])])
    raise IntegrityError(f"unknown head type {kind!r}")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> str:
    """Write a flat key -> tensor archive with a JSON header.

    The header records the format tag, every tensor's shape, a content
    digest and whatever ``meta`` carries (structure, seed lineage...).
    Returns the digest.
    """
    digest = _digest(tensors)
    header = dict(meta)
    header["format"] = CHECKPOINT_FORMAT
    header["shapes"] = {k: list(np.shape(v)) for k, v in sorted(tensors.items())}
    header["digest"] = digest
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return digest


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    if not os.path.exists(path):
        raise IntegrityError(f"missing checkpoint {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            tensors = {k: data[k].copy() for k in data.files if k != "__meta__"}
            header = json.loads(bytes(data["__meta__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise IntegrityError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: unsupported format {header.get('format')!r}")
    for k, shape in header["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise IntegrityError(f"{path}: tensor {k} has shape {tensors[k].shape}, header says {shape}")
    if _digest(tensors) != header["digest"]:
        raise IntegrityError(f"{path}: content digest mismatch")
    return tensors, header


def save_model(path, model: Model, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta["structure"] = model.structure()
    return save_checkpoint(path, model.named_parameters(), meta)


def load_model(path) -> tuple[Model, dict]:
    tensors, header = load_checkpoint(path)
    structure = header["structure"]
    ext = _extractor_from(structure["extractor"], tensors, "extractor.")
    head = _head_from(structure["head"], tensors, "head.")
    return Model(ext, head), header


def save_extractor(path, extractor, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta["structure"] = {"extractor": extractor.structure()}
    return save_checkpoint(path, {f"extractor.{k}": v for k, v in extractor.named_parameters().items()}, meta)


def load_extractor(path):
    tensors, header = load_checkpoint(path)
    return _extractor_from(header["structure"]["extractor"], tensors, "extractor."), header


def save_head(path, head, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta["structure"] = {"head": head.structure()}
    return save_checkpoint(path, {f"head.{k}": v for k, v in head.named_parameters().items()}, meta)


def load_head(path):
    tensors, header = load_checkpoint(path)
    return _head_from(header["structure"]["head"], tensors, "head."), header
