"""Compact architecture strings and the network roles built from them.

The grammar covers c(k,f) conv, ct(k,f) transposed conv, mp(p) max-pool,
d(n) dense, sm(n) dense+softmax, z(r,v) dual latent head, bare `relu` and
`bn` tokens, and a repeat prefix n(...). Networks come in four roles:
classifier (ends in sm), discriminator (ends in d(1), sigmoid output),
encoder (ends in z(r,v)) and decoder (sigmoid final activation).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, ParseError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# architecture strings
# ---------------------------------------------------------------------------

_ARITY = {"c": 2, "ct": 2, "mp": 1, "d": 1, "sm": 1, "z": 2, "bn": 0, "relu": 0}
_SEPARATORS = " \t\r\n-"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...] = ()

    def render(self) -> str:
        if not self.args:
            return self.kind
        return f"{self.kind}({','.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]

    def render(self) -> str:
        """Canonical form: repeats expanded, single spaces between descriptors."""
        return " ".join(layer.render() for layer in self.layers)

    @property
    def latent_dims(self) -> tuple[int, int] | None:
        for layer in self.layers:
            if layer.kind == "z":
                return (layer.args[0], layer.args[1])
        return None


class _Scanner:
    def __init__(self, s: str):
        self.s = s
        self.i = 0

    def skip(self):
        while self.i < len(self.s) and self.s[self.i] in _SEPARATORS:
            self.i += 1

    def done(self) -> bool:
        self.skip()
        return self.i >= len(self.s)

    def peek(self) -> str:
        return self.s[self.i] if self.i < len(self.s) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise ParseError(f"expected '{ch}'", self.i)
        self.i += 1

    def read_int(self) -> int:
        start = self.i
        while self.i < len(self.s) and self.s[self.i].isdigit():
            self.i += 1
        if self.i == start:
            raise ParseError("expected an integer", start)
        return int(self.s[start : self.i])

    def read_name(self) -> tuple[str, int]:
        start = self.i
        while self.i < len(self.s) and self.s[self.i].isalpha():
            self.i += 1
        if self.i == start:
            raise ParseError("expected a layer name", start)
        return self.s[start : self.i], start


def _parse_sequence(sc: _Scanner, closing: bool) -> list[tuple[LayerSpec, int]]:
    out: list[tuple[LayerSpec, int]] = []
    while True:
        sc.skip()
        if sc.i >= len(sc.s):
            if closing:
                raise ParseError("unclosed '('", sc.i)
            return out
        ch = sc.peek()
        if ch == ")":
            if not closing:
                raise ParseError("unmatched ')'", sc.i)
            return out
        if ch.isdigit():
            # repeat prefix: n(...)
            start = sc.i
            count = sc.read_int()
            sc.skip()
            sc.expect("(")
            inner = _parse_sequence(sc, closing=True)
            sc.expect(")")
            if count < 1:
                raise ParseError("repeat count must be positive", start)
            if not inner:
                raise ParseError("empty repeat group", start)
            out.extend(inner * count)
            continue
        name, start = sc.read_name()
        if name not in _ARITY:
            raise ParseError(f"unknown layer token '{name}'", start)
        arity = _ARITY[name]
        args: tuple[int, ...] = ()
        sc.skip()
        if arity > 0:
            sc.expect("(")
            vals = []
            for k in range(arity):
                sc.skip()
                arg_at = sc.i
                v = sc.read_int()
                if v <= 0:
                    raise ParseError(f"parameter of '{name}' must be positive", arg_at)
                vals.append(v)
                sc.skip()
                if k < arity - 1:
                    sc.expect(",")
            sc.expect(")")
            args = tuple(vals)
        out.append((LayerSpec(name, args), start))


def parse_arch(s: str) -> ArchSpec:
    """Parse an architecture string; errors carry the offending offset."""
    if not isinstance(s, str) or not s.strip():
        raise ParseError("empty architecture string", 0)
    sc = _Scanner(s)
    placed = _parse_sequence(sc, closing=False)
    z_seen_at = None
    for spec, offset in placed:
        if z_seen_at is not None:
            raise ParseError("z(r,v) must be the final layer", offset)
        if spec.kind == "z":
            z_seen_at = offset
    return ArchSpec(tuple(spec for spec, _ in placed))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualLatentHead:
    """Evaluation of the two encoder heads: means and log-variances."""

    mu_r: Tensor
    logvar_r: Tensor
    mu_v: Tensor
    logvar_v: Tensor


def _flatten_batch(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


class _Conv:
    def __init__(self, name, rng, in_ch, k, f, activation="relu"):
        fan_in = in_ch * k * k
        self.w = Tensor(rng.normal(0.0, fan_in ** -0.5, size=(f, in_ch, k, k)))
        self.b = Tensor(np.zeros(f))
        self.name = name
        self.activation = activation

    def params(self):
        return {f"{self.name}.weight": self.w, f"{self.name}.bias": self.b}

    def forward(self, x):
        out = T.conv2d(x, self.w, self.b)
        return _activate(out, self.activation)


class _ConvT:
    def __init__(self, name, rng, in_ch, k, f, stride, activation="relu"):
        fan_in = in_ch * k * k
        self.w = Tensor(rng.normal(0.0, fan_in ** -0.5, size=(in_ch, f, k, k)))
        self.b = Tensor(np.zeros(f))
        self.name = name
        self.stride = stride
        self.activation = activation

    def params(self):
        return {f"{self.name}.weight": self.w, f"{self.name}.bias": self.b}

    def forward(self, x):
        out = T.conv2d_transpose(x, self.w, self.b, stride=self.stride)
        return _activate(out, self.activation)


class _MaxPool:
    def __init__(self, name, p):
        self.name = name
        self.p = p

    def params(self):
        return {}

    def forward(self, x):
        return T.maxpool2d(x, self.p)


class _Dense:
    def __init__(self, name, rng, fan_in, units, activation="relu", reshape_to=None):
        self.w = Tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, units)))
        self.b = Tensor(np.zeros(units))
        self.name = name
        self.activation = activation
        self.reshape_to = reshape_to  # (C, H, W) when feeding a spatial layer

    def params(self):
        return {f"{self.name}.weight": self.w, f"{self.name}.bias": self.b}

    def forward(self, x):
        out = T.add_rowvec(T.matmul(_flatten_batch(x), self.w), self.b)
        out = _activate(out, self.activation)
        if self.reshape_to is not None:
            out = out.reshape((out.shape[0],) + self.reshape_to)
        return out


class _Softmax:
    """Dense projection followed by a row softmax."""

    def __init__(self, name, rng, fan_in, units):
        self.w = Tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, units)))
        self.b = Tensor(np.zeros(units))
        self.name = name

    def params(self):
        return {f"{self.name}.weight": self.w, f"{self.name}.bias": self.b}

    def logits(self, x):
        return T.add_rowvec(T.matmul(_flatten_batch(x), self.w), self.b)

    def forward(self, x):
        return T.softmax(self.logits(x))


class _DualHead:
    """Four linear projections from a shared trunk: (mu, logvar) x (r, v)."""

    def __init__(self, name, rng, fan_in, r_dim, v_dim):
        std = fan_in ** -0.5
        self.weights = {}
        for key, dim in (("mu_r", r_dim), ("logvar_r", r_dim), ("mu_v", v_dim), ("logvar_v", v_dim)):
            self.weights[key] = (
                Tensor(rng.normal(0.0, std, size=(fan_in, dim))),
                Tensor(np.zeros(dim)),
            )
        self.name = name

    def params(self):
        out = {}
        for key, (w, b) in self.weights.items():
            out[f"{self.name}.{key}.weight"] = w
            out[f"{self.name}.{key}.bias"] = b
        return out

    def forward(self, x):
        flat = _flatten_batch(x)
        vals = {}
        for key, (w, b) in self.weights.items():
            vals[key] = T.add_rowvec(T.matmul(flat, w), b)
        return DualLatentHead(vals["mu_r"], vals["logvar_r"], vals["mu_v"], vals["logvar_v"])


class _Relu:
    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x):
        return T.relu(x)


def _activate(x, activation):
    if activation == "relu":
        return T.relu(x)
    if activation == "sigmoid":
        return T.sigmoid(x)
    if activation is None:
        return x
    raise ContractError(f"unknown activation '{activation}'")


ROLES = ("classifier", "discriminator", "encoder", "decoder")


class Network:
    """A layer stack built from an ArchSpec for a specific role and input shape.

    The forward output shape is fully determined by the spec and input shape;
    parameters are created once at construction (Gaussian, std = fan_in^-1/2,
    zero biases) and never change count.
    """

    def __init__(
        self,
        spec: ArchSpec | str,
        input_shape,
        role: str = "classifier",
        rng=None,
        ct_stride: int = 1,
        output_shape=None,
    ):
        if isinstance(spec, str):
            spec = parse_arch(spec)
        if role not in ROLES:
            raise ContractError(f"unknown network role '{role}'")
        if rng is None:
            rng = np.random.default_rng(0)
        self.spec = spec
        self.role = role
        self.ct_stride = ct_stride
        self.input_shape = tuple(int(v) for v in input_shape)
        self.output_shape = tuple(int(v) for v in output_shape) if output_shape else None
        self.layers: list = []
        self._build(rng)

    # -- construction --------------------------------------------------------

    def _build(self, rng):
        specs = self.spec.layers
        if not specs:
            raise ContractError("architecture has no layers")
        if self.role == "classifier" and specs[-1].kind != "sm":
            raise ContractError("classifier architectures must end in sm(n)")
        if self.role == "encoder" and specs[-1].kind != "z":
            raise ContractError("encoder architectures must end in z(r,v)")
        if self.role == "discriminator" and (specs[-1].kind != "d" or specs[-1].args[0] != 1):
            raise ContractError("discriminator architectures must end in d(1)")
        if self.role == "decoder" and specs[-1].kind in ("sm", "z"):
            raise ContractError("decoder architectures cannot end in sm or z")

        state: tuple  # ("spatial", C, H, W) or ("flat", K)
        if len(self.input_shape) == 3:
            state = ("spatial",) + self.input_shape
        elif len(self.input_shape) == 1:
            state = ("flat", self.input_shape[0])
        else:
            raise ContractError("input_shape must be (C, H, W) or (features,)")

        for idx, ls in enumerate(specs):
            name = f"{idx}.{ls.kind}"
            final = idx == len(specs) - 1
            if ls.kind == "bn":
                raise ContractError("batch-norm layers are out of scope for this build")
            if ls.kind == "relu":
                self.layers.append(_Relu(name))
            elif ls.kind == "c":
                if state[0] != "spatial":
                    raise DimensionError("conv layer requires a spatial input")
                _, c, h, w = state
                k, f = ls.args
                if k > h or k > w:
                    raise DimensionError(f"layer {idx}: kernel {k} larger than input {h}x{w}")
                act = "sigmoid" if (final and self.role == "decoder") else "relu"
                self.layers.append(_Conv(name, rng, c, k, f, activation=act))
                state = ("spatial", f, h - k + 1, w - k + 1)
            elif ls.kind == "ct":
                if state[0] != "spatial":
                    raise DimensionError("transposed conv layer requires a spatial input")
                _, c, h, w = state
                k, f = ls.args
                act = "sigmoid" if (final and self.role == "decoder") else "relu"
                self.layers.append(_ConvT(name, rng, c, k, f, self.ct_stride, activation=act))
                state = (
                    "spatial",
                    f,
                    (h - 1) * self.ct_stride + k,
                    (w - 1) * self.ct_stride + k,
                )
            elif ls.kind == "mp":
                if state[0] != "spatial":
                    raise DimensionError("max-pool layer requires a spatial input")
                _, c, h, w = state
                p = ls.args[0]
                if h // p < 1 or w // p < 1:
                    raise DimensionError(f"layer {idx}: pool {p} larger than input {h}x{w}")
                self.layers.append(_MaxPool(name, p))
                state = ("spatial", c, h // p, w // p)
            elif ls.kind == "d":
                fan_in = state[1] if state[0] == "flat" else int(np.prod(state[1:]))
                units = ls.args[0]
                if final and self.role == "discriminator":
                    act = "sigmoid"
                elif final and self.role == "decoder":
                    act = "sigmoid"
                else:
                    act = "relu"
                reshape_to = None
                nxt = specs[idx + 1].kind if not final else None
                if nxt in ("c", "ct", "mp"):
                    side = int(round(units ** 0.5))
                    if side * side != units:
                        raise ContractError(
                            f"layer {idx}: dense({units}) feeds a spatial layer but is not square"
                        )
                    reshape_to = (1, side, side)
                self.layers.append(_Dense(name, rng, fan_in, units, act, reshape_to))
                state = ("spatial",) + reshape_to if reshape_to else ("flat", units)
            elif ls.kind == "sm":
                if not final:
                    raise ContractError("sm(n) must be the final layer")
                fan_in = state[1] if state[0] == "flat" else int(np.prod(state[1:]))
                self.layers.append(_Softmax(name, rng, fan_in, ls.args[0]))
                state = ("flat", ls.args[0])
            elif ls.kind == "z":
                fan_in = state[1] if state[0] == "flat" else int(np.prod(state[1:]))
                self.layers.append(_DualHead(name, rng, fan_in, ls.args[0], ls.args[1]))
                state = ("latent",) + ls.args
            else:  # pragma: no cover
                raise ContractError(f"unhandled layer kind '{ls.kind}'")
        self._out_state = state
        if self.role == "decoder" and self.output_shape is not None:
            flat = state[1] if state[0] == "flat" else int(np.prod(state[1:]))
            if flat != int(np.prod(self.output_shape)):
                raise DimensionError(
                    f"decoder produces {flat} values but output shape {self.output_shape} "
                    f"needs {int(np.prod(self.output_shape))}"
                )

    # -- parameters ----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.params().values())

    # -- forward -------------------------------------------------------------

    def _check_input(self, x: Tensor):
        expect = self.input_shape
        if len(expect) == 3:
            if x.ndim != 4 or x.shape[1:] != expect:
                raise DimensionError(f"expected input (N, {expect}), got {x.shape}")
        else:
            if x.ndim != 2 or x.shape[1] != expect[0]:
                raise DimensionError(f"expected input (N, {expect[0]}), got {x.shape}")

    def forward(self, x, logits: bool = False) -> Tensor:
        """Run the stack. For classifier/discriminator, logits=True stops
        before the final softmax/sigmoid."""
        if self.role == "encoder":
            raise ContractError("use encode_dual for encoder networks")
        if not isinstance(x, Tensor):
            x = Tensor(x, requires_grad=False)
        self._check_input(x)
        out = x
        for i, layer in enumerate(self.layers):
            final = i == len(self.layers) - 1
            if final and logits and isinstance(layer, _Softmax):
                return layer.logits(out)
            if final and logits and self.role == "discriminator":
                return T.add_rowvec(T.matmul(_flatten_batch(out), layer.w), layer.b)
            out = layer.forward(out)
        if self.role == "decoder" and self.output_shape is not None:
            out = out.reshape((out.shape[0],) + self.output_shape)
        return out

    def logits(self, x) -> Tensor:
        return self.forward(x, logits=True)

    def run_heads(self, x) -> DualLatentHead:
        if self.role != "encoder":
            raise ContractError("run_heads requires an encoder network")
        if not isinstance(x, Tensor):
            x = Tensor(x, requires_grad=False)
        self._check_input(x)
        out = x
        for layer in self.layers[:-1]:
            out = layer.forward(out)
        return self.layers[-1].forward(out)


# ---------------------------------------------------------------------------
# encoder / decoder entry points
# ---------------------------------------------------------------------------


def encode_dual(encoder: Network, x, sample: bool = False, rng=None):
    """Evaluate both latent heads; return (head, z_r, z_v).

    With sample off, z equals the head mean (evaluation mode); with sample on,
    z = mu + exp(logvar / 2) * eps with eps drawn standard normal from rng.
    """
    if encoder.spec.latent_dims is None:
        raise ContractError("encoder spec has no z(r,v) head")
    head = encoder.run_heads(x)
    if not sample:
        return head, head.mu_r, head.mu_v
    if rng is None:
        raise ContractError("sampling requires an rng")
    z_r = _reparameterize(head.mu_r, head.logvar_r, rng)
    z_v = _reparameterize(head.mu_v, head.logvar_v, rng)
    return head, z_r, z_v


def _reparameterize(mu: Tensor, logvar: Tensor, rng) -> Tensor:
    eps = Tensor(rng.standard_normal(mu.shape), requires_grad=False)
    return mu + T.exp(logvar * 0.5) * eps


def decode(decoder: Network, z, route: str) -> Tensor:
    """Decode a latent batch through the shared decoder.

    `route` ("r" or "v") names which head produced z; both routes share the
    decoder weights, so the flag only validates the latent width.
    """
    if route not in ("r", "v"):
        raise ContractError("route must be 'r' or 'v'")
    if not isinstance(z, Tensor):
        z = Tensor(z, requires_grad=False)
    expected = decoder.input_shape[0]
    if z.ndim != 2 or z.shape[1] != expected:
        raise ContractError(
            f"latent width {z.shape} does not match decoder input {expected} for route '{route}'"
        )
    return decoder.forward(z)


# ---------------------------------------------------------------------------
# checkpoints: named-tensor archive + architecture string
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NKP1"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, offset: int) -> tuple[str, int]:
    if len(buf) < offset + 4:
        raise FormatError("checkpoint truncated in string length")
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + n:
        raise FormatError("checkpoint truncated in string payload")
    return buf[offset : offset + n].decode("utf-8"), offset + n


def save_network(net: Network, path) -> None:
    """Write architecture string, rebuild metadata, and all named tensors."""
    meta = {
        "role": net.role,
        "input_shape": list(net.input_shape),
        "ct_stride": net.ct_stride,
        "output_shape": list(net.output_shape) if net.output_shape else None,
    }
    parts = [_CKPT_MAGIC, _pack_str(net.spec.render()), _pack_str(json.dumps(meta))]
    params = net.params()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        parts.append(_pack_str(name))
        parts.append(T.to_blob(t))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a network checkpoint")
    arch, offset = _unpack_str(buf, 4)
    meta_json, offset = _unpack_str(buf, offset)
    meta = json.loads(meta_json)
    net = Network(
        arch,
        meta["input_shape"],
        role=meta["role"],
        ct_stride=meta.get("ct_stride", 1),
        output_shape=meta.get("output_shape"),
    )
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    params = net.params()
    if count != len(params):
        raise FormatError(f"{path}: checkpoint holds {count} tensors, network needs {len(params)}")
    for _ in range(count):
        name, offset = _unpack_str(buf, offset)
        t, offset = T.from_blob(buf, offset)
        if name not in params:
            raise FormatError(f"{path}: unknown tensor '{name}'")
        if t.shape != params[name].shape:
            raise FormatError(f"{path}: tensor '{name}' has shape {t.shape}")
        params[name].data = t.data
    return net
