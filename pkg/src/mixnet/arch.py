"""The three mix network variants for multi-modality slice segmentation.

All variants share the same building blocks:

* init unit: one 5x5 convolution + ReLU, optionally followed by a 2x2
  stride-2 pool (halves memory; the output unit then upscales by 2).
* residual dilated unit: 1x1 conv to f/2 channels, ReLU, 3x3 dilated
  conv at f/2, ReLU, 1x1 conv to the output width, plus a shortcut
  (identity when input and output widths match, else a 1x1 projection),
  summed and passed through a final ReLU.  Dilation grows the receptive
  field without pooling away localization.
* output unit: pyramid pooling global prior (average pooling onto
  2x2, 4x4, 6x6 and 12x12 grids, each bilinearly resized back and
  concatenated with the input, giving 5x the channels), then a 3x3
  convolution down to the class logits.

They differ in how the three modality streams are mixed:

* v1 stacks the modalities as input channels of one serial trunk; each
  level runs at ``modalities * filters`` channels.
* v2 keeps one stream per modality and alternates: odd levels fuse all
  streams into one summary unit, even levels update each stream from
  (stream, summary) pairs with unshared weights.
* v3 keeps the streams fully separate until the output unit.

Every level's output is retained and concatenated into the aggregate
map that feeds the output unit, so the prediction sees every scale.
v3's aggregate is ordered level-major with streams adjacent inside a
level, which makes its parameter space a coordinate-aligned subspace of
v1's; ``embed_v3_into_v1`` materializes that inclusion.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Node
from .errors import BuildError, ConfigError, ShapeError
from .tensor import Tensor, derive_seed, he_init, zeros

VARIANTS = ("v1", "v2", "v3")


@dataclass(frozen=True)
class NetConfig:
    """Structural description of one network.

    ``filters`` is the per-stream width: v2/v3 units run at ``filters``
    channels and v1 runs its trunk at ``modalities * filters`` so that a
    v3 network embeds into a v1 of the same config.
    """
    variant: str = "v2"
    modalities: int = 3
    classes: int = 4
    filters: int = 24
    dilations: tuple = (2, 1, 4, 1, 8)
    init_pool: bool = True
    pool_kind: str = "max"
    pyramid_bins: tuple = (2, 4, 6, 12)

    def validate(self) -> "NetConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.modalities < 1:
            raise ConfigError(f"modalities must be >= 1, got {self.modalities}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.filters < 2 or self.filters % 2:
            raise ConfigError(f"filters must be a positive even number, got {self.filters}")
        if not self.dilations:
            raise ConfigError("dilations must name at least one level")
        if any(int(d) < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if self.pool_kind not in ("max", "avg"):
            raise ConfigError(f"pool_kind must be 'max' or 'avg', got {self.pool_kind!r}")
        if not self.pyramid_bins or any(int(b) < 1 for b in self.pyramid_bins):
            raise ConfigError(f"pyramid_bins must be positive, got {self.pyramid_bins}")
        return self

    @property
    def trunk_filters(self) -> int:
        """Channel width of the v1 trunk (and of v2 summary inputs)."""
        return self.filters * self.modalities

    @property
    def levels(self) -> int:
        return len(self.dilations)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "modalities": self.modalities,
            "classes": self.classes,
            "filters": self.filters,
            "dilations": list(self.dilations),
            "init_pool": self.init_pool,
            "pool_kind": self.pool_kind,
            "pyramid_bins": list(self.pyramid_bins),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown network config keys: {sorted(extra)}")
        kw = dict(d)
        for key in ("dilations", "pyramid_bins"):
            if key in kw:
                kw[key] = tuple(int(v) for v in kw[key])
        return cls(**kw).validate()


class ParamStore:
    """Owns the trainable parameter nodes of one network.

    Parameters are created on first request with a seed derived from the
    store seed and the parameter name, so construction order cannot
    change initial values.  Names are stable; they are the checkpoint
    manifest and the coordinate system of the v3 -> v1 embedding.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Node] = {}

    def kernel(self, name: str, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        node = self._params.get(name)
        if node is not None:
            if node.shape != shape:
                raise BuildError(f"parameter {name!r} exists with shape "
                                 f"{node.shape}, requested {shape}")
            return node
        fan_in = int(np.prod(shape[:-1]))
        value = he_init(shape, fan_in, derive_seed(self.seed, name))
        node = Node.leaf(value, requires_grad=True, name=name)
        self._params[name] = node
        return node

    def bias(self, name: str, width: int) -> Node:
        node = self._params.get(name)
        if node is not None:
            if node.shape != (width,):
                raise BuildError(f"parameter {name!r} exists with shape "
                                 f"{node.shape}, requested {(width,)}")
            return node
        node = Node.leaf(zeros((width,)), requires_grad=True, name=name)
        self._params[name] = node
        return node

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str) -> Node:
        if name not in self._params:
            raise BuildError(f"no parameter named {name!r}")
        return self._params[name]

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    @property
    def param_count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_arrays(self) -> dict:
        """name -> float array, in creation order (shared, not copied)."""
        return {k: v.value.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            if missing or extra:
                raise BuildError(f"parameter set mismatch: missing={sorted(missing)[:4]} "
                                 f"extra={sorted(extra)[:4]}")
        for name, arr in arrays.items():
            node = self._params.get(name)
            if node is None:
                continue
            if node.shape != arr.shape:
                raise BuildError(f"checkpoint shape {arr.shape} does not match "
                                 f"{name!r} {node.shape}")
            node.value = Tensor(np.asarray(arr), dtype=node.dtype)


@dataclass
class UnitRow:
    """One line of the structure manifest."""
    name: str
    kind: str
    c_in: int
    c_out: int
    filters: int = 0
    dilation: int = 0
    params: int = 0


class Network:
    """A built network: config + parameter store + forward pass."""

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config.validate()
        self.store = ParamStore(seed)
        self.units: list[UnitRow] = []
        self._recording = True
        # materialize every parameter (and the manifest) with a dummy pass
        side = 2 * max(config.pyramid_bins) if config.init_pool else max(config.pyramid_bins)
        self.forward(np.zeros((1, side, side, config.modalities), np.float32))
        self._recording = False

    # -- building blocks ----------------------------------------------------

    def _conv(self, name: str, x: Node, k: int, c_out: int, dilation: int = 1) -> Node:
        c_in = x.shape[-1]
        w = self.store.kernel(name + ".w", (k, k, c_in, c_out))
        b = self.store.bias(name + ".b", c_out)
        return ops.conv2d(x, w, b, dilation=dilation, name=name)

    def _record(self, row: UnitRow, names: list) -> None:
        if not self._recording:
            return
        row.params = sum(self.store.get(n).value.size
                         for base in names for n in (base + ".w", base + ".b"))
        self.units.append(row)

    def _init_unit(self, name: str, x: Node, c_out: int) -> Node:
        c_in = x.shape[-1]
        y = ops.relu(self._conv(name + ".conv", x, 5, c_out), name=name + ".relu")
        if self.config.init_pool:
            pool = ops.maxpool2x2 if self.config.pool_kind == "max" else ops.avgpool2x2
            y = pool(y, name=name + ".pool")
        self._record(UnitRow(name, "init", c_in, c_out), [name + ".conv"])
        return y

    def _res_unit(self, name: str, x: Node, c_out: int, f: int, d: int) -> Node:
        c_in = x.shape[-1]
        mid = f // 2
        y = ops.relu(self._conv(name + ".reduce", x, 1, mid))
        y = ops.relu(self._conv(name + ".dilated", y, 3, mid, dilation=d))
        y = self._conv(name + ".expand", y, 1, c_out)
        convs = [name + ".reduce", name + ".dilated", name + ".expand"]
        if c_in != c_out:
            shortcut = self._conv(name + ".shortcut", x, 1, c_out)
            convs.append(name + ".shortcut")
        else:
            shortcut = x
        out = ops.relu(ops.add(y, shortcut), name=name + ".out")
        self._record(UnitRow(name, "res", c_in, c_out, f, d), convs)
        return out

    def _output_unit(self, name: str, x: Node, out_hw) -> Node:
        c_in = x.shape[-1]
        h, w = x.shape[1], x.shape[2]
        parts = [x]
        for bins in self.config.pyramid_bins:
            pooled = ops.avgpool_region(x, bins, name=f"{name}.pool{bins}")
            parts.append(ops.bilinear_resize(pooled, h, w, name=f"{name}.prior{bins}"))
        y = ops.concat_channels(parts, name=name + ".concat")
        logits = self._conv(name + ".final", y, 3, self.config.classes)
        if self.config.init_pool:
            logits = ops.bilinear_resize(logits, out_hw[0], out_hw[1],
                                         name=name + ".upscale")
        self._record(UnitRow(name, "output", c_in, self.config.classes), [name + ".final"])
        return logits

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> Node:
        """Logits (N, H, W, classes) for a batch of slices (N, H, W, M)."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[-1] != self.config.modalities:
            raise ShapeError(f"expected input (N,H,W,{self.config.modalities}), "
                             f"got {x.shape}")
        out_hw = (x.shape[1], x.shape[2])
        if self.config.variant == "v1":
            agg = self._forward_v1(x)
        elif self.config.variant == "v2":
            agg = self._forward_v2(x)
        else:
            agg = self._forward_v3(x)
        return self._output_unit("out", agg, out_hw)

    def _stream_inputs(self, x: np.ndarray) -> list[Node]:
        return [Node.leaf(Tensor(np.ascontiguousarray(x[..., s:s + 1])),
                          name=f"input.s{s}")
                for s in range(self.config.modalities)]

    def _forward_v1(self, x: np.ndarray) -> Node:
        cfg = self.config
        y = self._init_unit("init", Node.leaf(Tensor(x), name="input"), cfg.trunk_filters)
        levels = []
        for i, d in enumerate(cfg.dilations, 1):
            y = self._res_unit(f"level{i}", y, cfg.trunk_filters, cfg.trunk_filters, int(d))
            levels.append(y)
        return ops.concat_channels(levels, name="aggregate")

    def _forward_v2(self, x: np.ndarray) -> Node:
        cfg = self.config
        streams = [self._init_unit(f"init.s{s}", inp, cfg.filters)
                   for s, inp in enumerate(self._stream_inputs(x))]
        collected = []
        summary = None
        for i, d in enumerate(cfg.dilations, 1):
            if i % 2:  # fuse all streams into one summary map
                fused = ops.concat_channels(streams, name=f"level{i}.fuse")
                summary = self._res_unit(f"level{i}", fused, cfg.filters,
                                         cfg.filters, int(d))
                collected.append(summary)
            else:      # refresh each stream from (stream, summary)
                nxt = []
                for s, stream in enumerate(streams):
                    pair = ops.concat_channels([stream, summary],
                                               name=f"level{i}.s{s}.fuse")
                    nxt.append(self._res_unit(f"level{i}.s{s}", pair,
                                              cfg.filters, cfg.filters, int(d)))
                streams = nxt
                collected.extend(nxt)
        return ops.concat_channels(collected, name="aggregate")

    def _forward_v3(self, x: np.ndarray) -> Node:
        cfg = self.config
        streams = [self._init_unit(f"init.s{s}", inp, cfg.filters)
                   for s, inp in enumerate(self._stream_inputs(x))]
        per_level: list[list[Node]] = [[] for _ in cfg.dilations]
        for s, stream in enumerate(streams):
            cur = stream
            for i, d in enumerate(cfg.dilations, 1):
                cur = self._res_unit(f"level{i}.s{s}", cur, cfg.filters,
                                     cfg.filters, int(d))
                per_level[i - 1].append(cur)
        # level-major, streams adjacent: lines up with the v1 trunk layout
        flat = [node for level in per_level for node in level]
        return ops.concat_channels(flat, name="aggregate")

    # -- introspection -------------------------------------------------------

    @property
    def param_count(self) -> int:
        return self.store.param_count

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        """Softmax class probabilities for a batch of slices."""
        return ops.softmax(self.forward(x).data, axis=-1)

    def receptive_field(self) -> int:
        """Receptive field (in input pixels) of one aggregate feature
        through the full serial path, including the final 3x3 conv and
        ignoring the global pyramid prior."""
        rf, jump = 1, 1
        rf += 4 * jump                       # 5x5 init conv
        if self.config.init_pool:
            rf += jump
            jump *= 2
        for d in self.config.dilations:      # 3x3 dilated: effective 2d+1
            rf += 2 * int(d) * jump
        rf += 2 * jump                       # output unit 3x3
        return rf

    def summary(self) -> str:
        cfg = self.config
        head = (f"{cfg.variant}: modalities={cfg.modalities} classes={cfg.classes} "
                f"filters={cfg.filters} pool={cfg.init_pool} "
                f"receptive_field={self.receptive_field()}")
        lines = [head, f"{'unit':28s} {'kind':7s} {'in':>5s} {'out':>5s} "
                       f"{'f':>4s} {'d':>3s} {'params':>9s}"]
        for u in self.units:
            lines.append(f"{u.name:28s} {u.kind:7s} {u.c_in:5d} {u.c_out:5d} "
                         f"{u.filters or '':>4} {u.dilation or '':>3} {u.params:9d}")
        lines.append(f"total parameters: {self.param_count}")
        return "\n".join(lines)


def build_network(config: NetConfig, seed: int = 0) -> Network:
    return Network(config, seed)


def embed_v3_into_v1(src: Network, dst: Optional[Network] = None,
                     seed: int = 0) -> Network:
    """Write a v3 network's parameters into a v1 network so the two
    compute the same function.

    Stream s of the source occupies channel block ``[s*filters, (s+1)*filters)``
    of every trunk feature map: the init kernel places each stream's 5x5
    filter on its own input modality, the three convolutions of every
    residual unit become block-diagonal, and the aggregate channel order
    coincides (v3 aggregates level-major with streams adjacent), so the
    output unit's final convolution transfers verbatim.  All v1 weights
    outside those blocks are zero: cross-modality connections exist in
    the v1 parameter space but are switched off.
    """
    cfg = src.config
    if cfg.variant != "v3":
        raise BuildError(f"embedding source must be a v3 network, got {cfg.variant}")
    if dst is None:
        dst = Network(replace(cfg, variant="v1"), seed=seed)
    if dst.config.variant != "v1":
        raise BuildError(f"embedding target must be a v1 network, got {dst.config.variant}")
    if replace(dst.config, variant="v3") != cfg:
        raise BuildError("embedding needs identical configs apart from the variant: "
                         f"{cfg} vs {dst.config}")

    m, fil = cfg.modalities, cfg.filters
    mid = fil // 2
    arrays = {name: np.zeros(node.shape, dtype=node.dtype)
              for name, node in dst.store.items()}

    for s in range(m):
        w = src.store.get(f"init.s{s}.conv.w").data
        b = src.store.get(f"init.s{s}.conv.b").data
        arrays["init.conv.w"][:, :, s, s * fil:(s + 1) * fil] = w[:, :, 0, :]
        arrays["init.conv.b"][s * fil:(s + 1) * fil] = b

    for i in range(1, cfg.levels + 1):
        for s in range(m):
            fs, fe = s * fil, (s + 1) * fil      # full-width block
            ms, me = s * mid, (s + 1) * mid      # mid-width block
            pre = f"level{i}.s{s}"
            arrays[f"level{i}.reduce.w"][0, 0, fs:fe, ms:me] = \
                src.store.get(pre + ".reduce.w").data[0, 0]
            arrays[f"level{i}.reduce.b"][ms:me] = src.store.get(pre + ".reduce.b").data
            arrays[f"level{i}.dilated.w"][:, :, ms:me, ms:me] = \
                src.store.get(pre + ".dilated.w").data
            arrays[f"level{i}.dilated.b"][ms:me] = src.store.get(pre + ".dilated.b").data
            arrays[f"level{i}.expand.w"][0, 0, ms:me, fs:fe] = \
                src.store.get(pre + ".expand.w").data[0, 0]
            arrays[f"level{i}.expand.b"][fs:fe] = src.store.get(pre + ".expand.b").data

    arrays["out.final.w"][...] = src.store.get("out.final.w").data
    arrays["out.final.b"][...] = src.store.get("out.final.b").data

    dst.store.load_arrays(arrays)
    return dst
