"""Feature-prediction network: convolutional backbone over the packed Gram
input, sigmoid power heads renormalized to the power budget, and (for the
multi-RB variant) per-stream combiner heads fed by the per-stream RB Gram.

Two forward paths share the same parameters: a plain-numpy path for fast
inference, and a graph path over :mod:`precodelab.autodiff` tensors used by
training. Structured pruning removes whole convolution filters (smallest
l-2 weight norm first) together with their batch-norm channel and the
matching input channels of the next convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import ConfigError, KeyFeatures

CHECKPOINT_VERSION = "lcp-model/1"

DEFAULT_CONV_MIMO = ((16, 7), (8, 5), (4, 3))
DEFAULT_CONV_OFDM = ((32, 7), (16, 5), (8, 3), (4, 3))


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the resolved architecture (used for complexity counts)."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    feature_size: int = 0  # spatial positions of the output map
    in_dim: int = 0
    out_dim: int = 0
    slope: float = 0.0


@dataclass
class NetworkModel:
    """Architecture description plus parameter tensors and batch-norm state."""

    kind: str                      # "mimo" or "ofdm"
    n_streams: int
    n_rb: int
    total_power: float
    conv_specs: tuple[tuple[int, int], ...]
    hidden: int
    q_hidden: int = 64
    lrelu_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    bn_running: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_size(self) -> int:
        return self.n_streams * self.n_rb

    def head_dims(self) -> dict[str, int]:
        dims = {"p": self.n_streams, "lam": self.n_streams * self.n_rb}
        return dims

    def clone(self) -> "NetworkModel":
        m = NetworkModel(
            kind=self.kind, n_streams=self.n_streams, n_rb=self.n_rb,
            total_power=self.total_power, conv_specs=self.conv_specs,
            hidden=self.hidden, q_hidden=self.q_hidden,
            lrelu_slope=self.lrelu_slope, bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum, seed=self.seed,
        )
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.bn_running = {k: v.copy() for k, v in self.bn_running.items()}
        return m

    def layer_specs(self) -> list[LayerSpec]:
        """Resolved layer list for operation counting."""
        s = self.input_size
        specs: list[LayerSpec] = []
        c_prev = 1
        for c_out, j in self.conv_specs:
            specs.append(LayerSpec(kind="conv2d", in_channels=c_prev,
                                   out_channels=c_out, kernel_size=j,
                                   feature_size=s * s))
            specs.append(LayerSpec(kind="batchnorm", in_channels=c_out,
                                   out_channels=c_out, feature_size=s * s))
            specs.append(LayerSpec(kind="leaky-relu", slope=self.lrelu_slope))
            c_prev = c_out
        specs.append(LayerSpec(kind="flatten"))
        flat = c_prev * s * s
        for name, out in self.head_dims().items():
            specs.append(LayerSpec(kind="fully-connected", in_dim=flat,
                                   out_dim=self.hidden))
            specs.append(LayerSpec(kind="leaky-relu", slope=self.lrelu_slope))
            specs.append(LayerSpec(kind="fully-connected", in_dim=self.hidden,
                                   out_dim=out))
            specs.append(LayerSpec(kind="sigmoid"))
        if self.kind == "ofdm":
            b = self.n_rb
            dims = (b * b, self.q_hidden, self.q_hidden, 2 * b)
            for i in range(3):
                specs.append(LayerSpec(kind="fully-connected", in_dim=dims[i],
                                       out_dim=dims[i + 1]))
                if i < 2:
                    specs.append(LayerSpec(kind="leaky-relu", slope=self.lrelu_slope))
        return specs


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_model(n_streams: int, total_power: float = 1.0, n_rb: int = 1,
               conv_specs=None, hidden: int = 128, q_hidden: int = 64,
               seed: int = 0) -> NetworkModel:
    """Freshly initialized model for the given problem size."""
    kind = "mimo" if n_rb == 1 else "ofdm"
    if conv_specs is None:
        conv_specs = DEFAULT_CONV_MIMO if kind == "mimo" else DEFAULT_CONV_OFDM
    model = NetworkModel(kind=kind, n_streams=n_streams, n_rb=n_rb,
                         total_power=total_power,
                         conv_specs=tuple(tuple(c) for c in conv_specs),
                         hidden=hidden, q_hidden=q_hidden, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    p = model.params
    c_prev = 1
    for i, (c_out, j) in enumerate(model.conv_specs):
        p[f"conv{i}.w"] = _he_normal(rng, (c_out, c_prev, j, j), c_prev * j * j)
        p[f"conv{i}.b"] = np.zeros(c_out)
        p[f"bn{i}.gamma"] = np.ones(c_out)
        p[f"bn{i}.beta"] = np.zeros(c_out)
        model.bn_running[f"bn{i}.mean"] = np.zeros(c_out)
        model.bn_running[f"bn{i}.var"] = np.ones(c_out)
        c_prev = c_out
    flat = c_prev * model.input_size ** 2
    for name, out in model.head_dims().items():
        p[f"{name}.fc0.w"] = _he_normal(rng, (flat, model.hidden), flat)
        p[f"{name}.fc0.b"] = np.zeros(model.hidden)
        p[f"{name}.fc1.w"] = _he_normal(rng, (model.hidden, out), model.hidden)
        p[f"{name}.fc1.b"] = np.zeros(out)
    if kind == "ofdm":
        b = n_rb
        dims = (b * b, q_hidden, q_hidden, 2 * b)
        for i in range(3):
            p[f"q.fc{i}.w"] = _he_normal(rng, (dims[i], dims[i + 1]), dims[i])
            p[f"q.fc{i}.b"] = np.zeros(dims[i + 1])
    return model


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _bn_graph(model: NetworkModel, x: Tensor, idx: int, training: bool) -> Tensor:
    gamma = Tensor(model.params[f"bn{idx}.gamma"], requires_grad=training)
    beta = Tensor(model.params[f"bn{idx}.beta"], requires_grad=training)
    _graph_refs(model, f"bn{idx}.gamma", gamma)
    _graph_refs(model, f"bn{idx}.beta", beta)
    if training:
        mu = x.mean(axis=0, keepdims=True).mean(axis=2, keepdims=True).mean(
            axis=3, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=0, keepdims=True).mean(axis=2, keepdims=True).mean(
            axis=3, keepdims=True)
        # running statistics track the detached batch moments
        m = model.bn_momentum
        model.bn_running[f"bn{idx}.mean"] *= 1.0 - m
        model.bn_running[f"bn{idx}.mean"] += m * mu.data.reshape(-1)
        model.bn_running[f"bn{idx}.var"] *= 1.0 - m
        model.bn_running[f"bn{idx}.var"] += m * var.data.reshape(-1)
        norm = xc * ((var + model.bn_eps) ** -0.5)
    else:
        rm = model.bn_running[f"bn{idx}.mean"][None, :, None, None]
        rv = model.bn_running[f"bn{idx}.var"][None, :, None, None]
        norm = (x - Tensor(rm)) * Tensor(1.0 / np.sqrt(rv + model.bn_eps))
    return norm * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def _graph_refs(model, name, tensor):
    # parameter tensors of the current graph pass, for the optimizer to read
    refs = getattr(model, "_graph_params", None)
    if refs is None:
        refs = {}
        setattr(model, "_graph_params", refs)
    refs[name] = tensor


def graph_params(model: NetworkModel) -> dict[str, Tensor]:
    """Parameter tensors touched by the most recent graph forward."""
    return dict(getattr(model, "_graph_params", {}))


def _heads_graph(model: NetworkModel, flat: Tensor, training: bool):
    out = {}
    for name, dim in model.head_dims().items():
        w0 = Tensor(model.params[f"{name}.fc0.w"], requires_grad=training)
        b0 = Tensor(model.params[f"{name}.fc0.b"], requires_grad=training)
        w1 = Tensor(model.params[f"{name}.fc1.w"], requires_grad=training)
        b1 = Tensor(model.params[f"{name}.fc1.b"], requires_grad=training)
        for nm, t in ((f"{name}.fc0.w", w0), (f"{name}.fc0.b", b0),
                      (f"{name}.fc1.w", w1), (f"{name}.fc1.b", b1)):
            _graph_refs(model, nm, t)
        h = (flat @ w0 + b0).leaky_relu(model.lrelu_slope)
        z = (h @ w1 + b1).sigmoid()
        # l-1 renormalization pins the sum to the power budget
        out[name] = z * (model.total_power / z.sum(axis=1, keepdims=True))
    return out


def forward_graph(model: NetworkModel, packed: Tensor, training: bool = True,
                  per_stream_gram: Tensor | None = None):
    """Graph forward pass. ``packed`` is (N, S, S) with S = M * B.

    Returns a dict with "p" (N, M), "lam" (N, M*B) and, for the multi-RB
    model, "q_re"/"q_im" (N, M, B). Parameter tensors are recorded on the
    model for the optimizer (see :func:`graph_params`).
    """
    setattr(model, "_graph_params", {})
    n = packed.shape[0]
    s = model.input_size
    if packed.shape[1:] != (s, s):
        raise ConfigError(f"expected packed input of size {s}, got {packed.shape}")
    x = packed.reshape(n, 1, s, s)
    for i in range(len(model.conv_specs)):
        w = Tensor(model.params[f"conv{i}.w"], requires_grad=training)
        b = Tensor(model.params[f"conv{i}.b"], requires_grad=training)
        _graph_refs(model, f"conv{i}.w", w)
        _graph_refs(model, f"conv{i}.b", b)
        x = ad.conv2d(x, w, b)
        x = _bn_graph(model, x, i, training)
        x = x.leaky_relu(model.lrelu_slope)
    flat = x.reshape(n, -1)
    out = _heads_graph(model, flat, training)
    if model.kind == "ofdm":
        if per_stream_gram is None:
            raise ConfigError("multi-RB forward needs the per-stream RB Grams")
        b_rb = model.n_rb
        h = per_stream_gram.reshape(n, model.n_streams, b_rb * b_rb)
        for i in range(3):
            w = Tensor(model.params[f"q.fc{i}.w"], requires_grad=training)
            bb = Tensor(model.params[f"q.fc{i}.b"], requires_grad=training)
            _graph_refs(model, f"q.fc{i}.w", w)
            _graph_refs(model, f"q.fc{i}.b", bb)
            h = h @ w + bb
            if i < 2:
                h = h.leaky_relu(model.lrelu_slope)
        out["q_re"] = h[:, :, :b_rb]
        out["q_im"] = h[:, :, b_rb:]
    return out


def forward(model: NetworkModel, packed: np.ndarray,
            per_stream_gram: np.ndarray | None = None) -> KeyFeatures:
    """Inference forward pass (plain numpy, running batch-norm statistics).

    Accepts one packed input (S, S); returns validated key features whose
    p and lambda sum exactly to the power budget.
    """
    out = forward_batch(model, packed[None], per_stream_gram=(
        per_stream_gram[None] if per_stream_gram is not None else None))
    q = None
    if model.kind == "ofdm":
        q = out["q_re"][0] + 1j * out["q_im"][0]
    lam = out["lam"][0]
    if model.n_rb > 1:
        lam = lam.reshape(model.n_streams, model.n_rb)
    feats = KeyFeatures(p=out["p"][0], lam=lam, q=q)
    feats.validate(model.total_power)
    return feats


def forward_batch(model: NetworkModel, packed: np.ndarray,
                  per_stream_gram: np.ndarray | None = None) -> dict:
    """Vectorized inference over a batch of packed inputs (N, S, S)."""
    s = model.input_size
    packed = np.asarray(packed, float)
    if packed.shape[1:] != (s, s):
        raise ConfigError(f"expected packed input of size {s}, got {packed.shape}")
    x = packed[:, None]
    for i in range(len(model.conv_specs)):
        w = model.params[f"conv{i}.w"]
        b = model.params[f"conv{i}.b"]
        x = ad._conv_forward(x, w, b)
        rm = model.bn_running[f"bn{i}.mean"][None, :, None, None]
        rv = model.bn_running[f"bn{i}.var"][None, :, None, None]
        x = (x - rm) / np.sqrt(rv + model.bn_eps)
        x = x * model.params[f"bn{i}.gamma"][None, :, None, None]
        x = x + model.params[f"bn{i}.beta"][None, :, None, None]
        x = np.where(x > 0.0, x, model.lrelu_slope * x)
    flat = x.reshape(x.shape[0], -1)
    out = {}
    for name in model.head_dims():
        h = flat @ model.params[f"{name}.fc0.w"] + model.params[f"{name}.fc0.b"]
        h = np.where(h > 0.0, h, model.lrelu_slope * h)
        z = h @ model.params[f"{name}.fc1.w"] + model.params[f"{name}.fc1.b"]
        z = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        out[name] = z * (model.total_power / z.sum(axis=1, keepdims=True))
    if model.kind == "ofdm":
        if per_stream_gram is None:
            raise ConfigError("multi-RB forward needs the per-stream RB Grams")
        b_rb = model.n_rb
        h = np.asarray(per_stream_gram, float).reshape(
            packed.shape[0], model.n_streams, b_rb * b_rb)
        for i in range(3):
            h = h @ model.params[f"q.fc{i}.w"] + model.params[f"q.fc{i}.b"]
            if i < 2:
                h = np.where(h > 0.0, h, model.lrelu_slope * h)
        out["q_re"] = h[:, :, :b_rb]
        out["q_im"] = h[:, :, b_rb:]
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: NetworkModel, path):
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "n_streams": model.n_streams,
        "n_rb": model.n_rb,
        "total_power": model.total_power,
        "conv_specs": [list(c) for c in model.conv_specs],
        "hidden": model.hidden,
        "q_hidden": model.q_hidden,
        "lrelu_slope": model.lrelu_slope,
        "bn_eps": model.bn_eps,
        "bn_momentum": model.bn_momentum,
        "seed": model.seed,
        "params": {k: v.tolist() for k, v in sorted(model.params.items())},
        "bn_running": {k: v.tolist() for k, v in sorted(model.bn_running.items())},
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> NetworkModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    model = NetworkModel(
        kind=doc["kind"], n_streams=doc["n_streams"], n_rb=doc["n_rb"],
        total_power=doc["total_power"],
        conv_specs=tuple(tuple(c) for c in doc["conv_specs"]),
        hidden=doc["hidden"], q_hidden=doc["q_hidden"],
        lrelu_slope=doc["lrelu_slope"], bn_eps=doc["bn_eps"],
        bn_momentum=doc["bn_momentum"], seed=doc["seed"],
    )
    model.params = {k: np.asarray(v, float) for k, v in doc["params"].items()}
    model.bn_running = {k: np.asarray(v, float) for k, v in doc["bn_running"].items()}
    return model


# ---------------------------------------------------------------------------
# Structured pruning
# ---------------------------------------------------------------------------


def prune_round(model: NetworkModel, remove: tuple[int, int]) -> NetworkModel:
    """Remove the given number of filters from the first two convolutions.

    Filters with the smallest l-2 weight norm go first; the matching
    batch-norm channels and input channels of the following convolution are
    removed with them. Returns a new model; the argument is untouched.
    """
    if len(model.conv_specs) < 3:
        raise ConfigError("pruning expects at least three convolution layers")
    out = model.clone()
    for layer, n_remove in enumerate(remove):
        if n_remove == 0:
            continue
        w = out.params[f"conv{layer}.w"]
        c_out = w.shape[0]
        if n_remove >= c_out:
            raise ConfigError(
                f"cannot remove {n_remove} of {c_out} filters in conv{layer}")
        norms = np.sqrt(np.sum(w.reshape(c_out, -1) ** 2, axis=1))
        order = np.argsort(norms, kind="stable")
        keep = np.sort(order[n_remove:])
        out.params[f"conv{layer}.w"] = w[keep]
        out.params[f"conv{layer}.b"] = out.params[f"conv{layer}.b"][keep]
        for nm in ("gamma", "beta"):
            out.params[f"bn{layer}.{nm}"] = out.params[f"bn{layer}.{nm}"][keep]
        for nm in ("mean", "var"):
            out.bn_running[f"bn{layer}.{nm}"] = out.bn_running[f"bn{layer}.{nm}"][keep]
        nxt = f"conv{layer + 1}.w"
        out.params[nxt] = out.params[nxt][:, keep]
        specs = list(out.conv_specs)
        specs[layer] = (len(keep), specs[layer][1])
        out.conv_specs = tuple(specs)
    return out


def conv_flops_term(model: NetworkModel) -> int:
    """Leading-order multiply count of the convolutional backbone."""
    total = 0
    for spec in model.layer_specs():
        if spec.kind == "conv2d":
            total += (spec.feature_size * spec.kernel_size ** 2
                      * spec.in_channels * spec.out_channels)
    return total
