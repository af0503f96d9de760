"""Desk-scale decoder-only transformer in numpy.

Llama-style blocks: RMSNorm -> rotary attention -> residual, RMSNorm ->
SiLU-gated MLP -> residual, no biases anywhere. Weights are float32 and all
matrices are stored (fan_in, fan_out) so application is `x @ W`.

Two activation sites are traced for the pruning pipeline: the gated MLP
intermediate (width d_ff, input to w_down) and the concatenated attention
head output (width d_model, input to wo). Pruned layers may carry fewer
heads or MLP channels than the reference config; per-layer widths are always
derived from the arrays themselves.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_npz, save_npz

SITE_MLP = "mlp"
SITE_ATTN = "attn"
SITES = (SITE_MLP, SITE_ATTN)

_NORM_EPS = 1e-12
_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norm_attn", "norm_mlp")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab_size: int = 256
    max_seq: int = 256

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        for name in ("d_model", "n_heads", "d_head", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError("n_heads * d_head must equal d_model")
        if self.d_head % 2:
            raise ValueError("d_head must be even (rotary embedding works on pairs)")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm_attn: np.ndarray
    norm_mlp: np.ndarray

    @property
    def d_ff(self) -> int:
        return self.w_gate.shape[1]

    def n_heads(self, d_head: int) -> int:
        return self.wq.shape[1] // d_head

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{f: getattr(self, f).copy() for f in _LAYER_FIELDS})


@dataclass
class TinyModel:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    norm_out: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        c = self.config
        if len(self.layers) != c.n_layers:
            raise ValueError("layer count does not match config")
        if self.embed.shape != (c.vocab_size, c.d_model):
            raise ValueError("embedding table shape mismatch")
        if self.w_out.shape != (c.d_model, c.vocab_size):
            raise ValueError("output head shape mismatch")
        for i, lw in enumerate(self.layers):
            if lw.wq.shape[1] % c.d_head != 0 or lw.wq.shape[1] == 0:
                raise ValueError(f"layer {i}: attention width not a head multiple")
            if lw.wo.shape != (lw.wq.shape[1], c.d_model):
                raise ValueError(f"layer {i}: wo shape mismatch")
            if lw.w_down.shape != (lw.w_gate.shape[1], c.d_model):
                raise ValueError(f"layer {i}: w_down shape mismatch")

    def copy(self) -> "TinyModel":
        return TinyModel(
            config=self.config,
            embed=self.embed.copy(),
            layers=[lw.copy() for lw in self.layers],
            norm_out=self.norm_out.copy(),
            w_out=self.w_out.copy(),
        )

    def site_width(self, layer: int, site: str) -> int:
        lw = self.layers[layer]
        if site == SITE_MLP:
            return lw.d_ff
        if site == SITE_ATTN:
            return lw.wo.shape[0]
        raise ValueError(f"unknown site {site!r}")

    def n_params(self) -> int:
        total = self.embed.size + self.norm_out.size + self.w_out.size
        for lw in self.layers:
            total += sum(getattr(lw, f).size for f in _LAYER_FIELDS)
        return int(total)

    def fingerprint(self) -> str:
        return fingerprint({"config": asdict(self.config)}, _weight_arrays(self))


@dataclass
class ForwardTrace:
    """Per-layer activations from one sequence (batch dimension stripped)."""

    embeddings: np.ndarray            # (T, d_model) layer-0 token embeddings
    resid: list[np.ndarray]           # residual stream after each layer, (T, d_model)
    mlp: list[np.ndarray]             # gated MLP intermediate, (T, d_ff_layer)
    attn: list[np.ndarray]            # concatenated head output, (T, d_model)

    def site_values(self, layer: int, site: str) -> np.ndarray:
        if site == SITE_MLP:
            return self.mlp[layer]
        if site == SITE_ATTN:
            return self.attn[layer]
        raise ValueError(f"unknown site {site!r}")


def _weight_arrays(model: TinyModel) -> dict[str, np.ndarray]:
    arrays = {"embed": model.embed, "norm_out": model.norm_out, "w_out": model.w_out}
    for i, lw in enumerate(model.layers):
        for f in _LAYER_FIELDS:
            arrays[f"layers.{i}.{f}"] = getattr(lw, f)
    return arrays


def init_random(config: ModelConfig, seed: int) -> TinyModel:
    """Zero-mean init scaled by 1/sqrt(fan_in); norm gains start at one."""
    rng = np.random.default_rng(seed)

    def mat(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out), dtype=np.float32) * np.float32(1.0 / math.sqrt(fan_in))

    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=mat(config.d_model, config.d_model),
                wk=mat(config.d_model, config.d_model),
                wv=mat(config.d_model, config.d_model),
                wo=mat(config.d_model, config.d_model),
                w_gate=mat(config.d_model, config.d_ff),
                w_up=mat(config.d_model, config.d_ff),
                w_down=mat(config.d_ff, config.d_model),
                norm_attn=np.ones(config.d_model, dtype=np.float32),
                norm_mlp=np.ones(config.d_model, dtype=np.float32),
            )
        )
    embed = rng.standard_normal((config.vocab_size, config.d_model), dtype=np.float32)
    embed *= np.float32(1.0 / math.sqrt(config.d_model))
    return TinyModel(
        config=config,
        embed=embed,
        layers=layers,
        norm_out=np.ones(config.d_model, dtype=np.float32),
        w_out=mat(config.d_model, config.vocab_size),
    )


# --- numerics --------------------------------------------------------------


def rmsnorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the last axis to unit RMS; returns (normalized, inv_rms)."""
    s = np.mean(np.square(x), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(s + _NORM_EPS)
    return x * r, r


def _rmsnorm_bwd(x, gain, r, dy):
    d = x.shape[-1]
    dg = np.sum(dy * (x * r), axis=tuple(range(x.ndim - 1)))
    dxn = dy * gain
    dx = r * dxn - x * (r**3) * (np.sum(dxn * x, axis=-1, keepdims=True) / d)
    return dx, dg


def _rope_tables(n_pos: int, d_head: int, dtype):
    half = d_head // 2
    inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    angles = np.arange(n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Rotate (even, odd) pairs of each head dim; sign=-1 inverts the rotation."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c = cos[None, :, None, :]
    s = sin[None, :, None, :] * sign
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward_batch(model: TinyModel, tokens: np.ndarray, want: str = ""):
    """Shared forward path. want="" logits only, "cache" training caches,
    "taps" activation traces."""
    cfg = model.config
    B, T = tokens.shape
    if T < 1:
        raise ValueError("empty token sequence")
    if T > cfg.max_seq:
        raise ValueError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary")

    x = model.embed[tokens]
    dtype = x.dtype
    cos, sin = _rope_tables(T, cfg.d_head, dtype)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = 1.0 / math.sqrt(cfg.d_head)

    cache = {"x0": x, "layers": [], "cos": cos, "sin": sin}
    taps = {"embeddings": x, "resid": [], "mlp": [], "attn": []}

    for lw in model.layers:
        n_heads = lw.n_heads(cfg.d_head)
        x_in = x
        xn1, r1 = rmsnorm(x_in)
        a = xn1 * lw.norm_attn
        q = (a @ lw.wq).reshape(B, T, n_heads, cfg.d_head)
        k = (a @ lw.wk).reshape(B, T, n_heads, cfg.d_head)
        v = (a @ lw.wv).reshape(B, T, n_heads, cfg.d_head)
        qh = _rope(q, cos, sin).transpose(0, 2, 1, 3)
        kh = _rope(k, cos, sin).transpose(0, 2, 1, 3)
        vh = v.transpose(0, 2, 1, 3)
        scores = np.where(causal, -np.inf, (qh @ kh.swapaxes(-1, -2)) * scale)
        p = _softmax(scores)
        cat = (p @ vh).transpose(0, 2, 1, 3).reshape(B, T, n_heads * cfg.d_head)
        x_mid = x_in + cat @ lw.wo

        xn2, r2 = rmsnorm(x_mid)
        b = xn2 * lw.norm_mlp
        gate = b @ lw.w_gate
        up = b @ lw.w_up
        sg = 1.0 / (1.0 + np.exp(-gate))
        act = gate * sg * up
        x = x_mid + act @ lw.w_down

        if want == "cache":
            cache["layers"].append(
                dict(x_in=x_in, r1=r1, a=a, qh=qh, kh=kh, vh=vh, p=p, cat=cat,
                     x_mid=x_mid, r2=r2, b=b, gate=gate, up=up, sg=sg, act=act)
            )
        elif want == "taps":
            taps["resid"].append(x)
            taps["mlp"].append(act)
            taps["attn"].append(cat)

    xnf, rf = rmsnorm(x)
    fn = xnf * model.norm_out
    logits = fn @ model.w_out

    if want == "cache":
        cache.update(x_f=x, rf=rf, fn=fn, tokens=tokens)
        return logits, cache
    if want == "taps":
        return logits, taps
    return logits, None


def forward(model: TinyModel, tokens) -> np.ndarray:
    """Logits (T, vocab) for one token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, _ = _forward_batch(model, tokens[None, :])
    return logits[0]


def forward_with_taps(model: TinyModel, tokens) -> tuple[np.ndarray, ForwardTrace]:
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, taps = _forward_batch(model, tokens[None, :], want="taps")
    return logits[0], ForwardTrace(
        embeddings=taps["embeddings"][0],
        resid=[r[0] for r in taps["resid"]],
        mlp=[m[0] for m in taps["mlp"]],
        attn=[a[0] for a in taps["attn"]],
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    l64 = logits.astype(np.float64)
    m = np.max(l64, axis=-1, keepdims=True)
    return l64 - m - np.log(np.sum(np.exp(l64 - m), axis=-1, keepdims=True))


def sequence_logprob(model: TinyModel, context, continuation) -> tuple[float, int]:
    """Sum of continuation token log-probs given the preceding tokens.

    Returns (sum_logprob, n_continuation_tokens) so callers can length-
    normalize. The context must be nonempty: a byte-level model has no BOS,
    so the first continuation token needs at least one predictor position.
    """
    context = np.asarray(context, dtype=np.int64)
    continuation = np.asarray(continuation, dtype=np.int64)
    if continuation.size == 0:
        raise ValueError("empty continuation")
    if context.size == 0:
        raise ValueError("empty context")
    full = np.concatenate([context, continuation])
    logits = forward(model, full)
    lp = log_softmax(logits)
    rows = np.arange(context.size - 1, full.size - 1)
    total = float(np.sum(lp[rows, continuation]))
    return total, int(continuation.size)


def greedy_generate(model: TinyModel, prompt, n_new: int) -> np.ndarray:
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("empty prompt")
    if prompt.size + n_new > model.config.max_seq:
        raise ValueError("prompt + n_new exceeds max_seq")
    tokens = prompt
    for _ in range(n_new):
        logits = forward(model, tokens)
        nxt = int(np.argmax(logits[-1]))  # argmax ties resolve to the lowest id
        tokens = np.append(tokens, nxt)
    return tokens


# --- training ---------------------------------------------------------------


def _param_arrays(model: TinyModel) -> dict[str, np.ndarray]:
    return _weight_arrays(model)


def _xent_and_dlogits(logits: np.ndarray, targets: np.ndarray):
    B, T, V = logits.shape
    flat = logits.reshape(-1, V)
    tgt = targets.reshape(-1)
    m = np.max(flat, axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = np.sum(e, axis=-1, keepdims=True)
    lse = (m + np.log(z)).squeeze(-1)
    loss = float(np.mean(lse - flat[np.arange(flat.shape[0]), tgt]))
    dflat = e / z
    dflat[np.arange(flat.shape[0]), tgt] -= 1.0
    dflat /= flat.shape[0]
    return loss, dflat.reshape(B, T, V).astype(logits.dtype)


def loss_and_grads(model: TinyModel, inputs: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and gradients for every weight array."""
    cfg = model.config
    logits, c = _forward_batch(model, inputs, want="cache")
    loss, dlogits = _xent_and_dlogits(logits, targets)

    grads: dict[str, np.ndarray] = {}
    d = cfg.d_model
    fn_flat = c["fn"].reshape(-1, d)
    grads["w_out"] = fn_flat.T @ dlogits.reshape(-1, cfg.vocab_size)
    dfn = dlogits @ model.w_out.T
    dx, grads["norm_out"] = _rmsnorm_bwd(c["x_f"], model.norm_out, c["rf"], dfn)

    scale = 1.0 / math.sqrt(cfg.d_head)
    cos, sin = c["cos"], c["sin"]
    for i in range(cfg.n_layers - 1, -1, -1):
        lw = model.layers[i]
        lc = c["layers"][i]
        B, T, _ = lc["b"].shape

        # MLP block: x = x_mid + act @ w_down
        dm = dx
        grads[f"layers.{i}.w_down"] = lc["act"].reshape(-1, lw.d_ff).T @ dm.reshape(-1, d)
        dact = dm @ lw.w_down.T
        gate, up, sg = lc["gate"], lc["up"], lc["sg"]
        dup = dact * (gate * sg)
        dgate = dact * up * sg * (1.0 + gate * (1.0 - sg))
        b_flat = lc["b"].reshape(-1, d)
        grads[f"layers.{i}.w_gate"] = b_flat.T @ dgate.reshape(-1, lw.d_ff)
        grads[f"layers.{i}.w_up"] = b_flat.T @ dup.reshape(-1, lw.d_ff)
        db = dgate @ lw.w_gate.T + dup @ lw.w_up.T
        dxm_norm, grads[f"layers.{i}.norm_mlp"] = _rmsnorm_bwd(lc["x_mid"], lw.norm_mlp, lc["r2"], db)
        dx_mid = dx + dxm_norm

        # attention block: x_mid = x_in + cat @ wo
        n_heads = lw.n_heads(cfg.d_head)
        width = n_heads * cfg.d_head
        do = dx_mid
        grads[f"layers.{i}.wo"] = lc["cat"].reshape(-1, width).T @ do.reshape(-1, d)
        dcat = (do @ lw.wo.T).reshape(B, T, n_heads, cfg.d_head).transpose(0, 2, 1, 3)
        dp = dcat @ lc["vh"].swapaxes(-1, -2)
        dvh = lc["p"].swapaxes(-1, -2) @ dcat
        p = lc["p"]
        dscores = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqh = (dscores @ lc["kh"]) * scale
        dkh = (dscores.swapaxes(-1, -2) @ lc["qh"]) * scale
        dq = _rope(dqh.transpose(0, 2, 1, 3), cos, sin, sign=-1.0).reshape(B, T, width)
        dk = _rope(dkh.transpose(0, 2, 1, 3), cos, sin, sign=-1.0).reshape(B, T, width)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, width)
        a_flat = lc["a"].reshape(-1, d)
        grads[f"layers.{i}.wq"] = a_flat.T @ dq.reshape(-1, width)
        grads[f"layers.{i}.wk"] = a_flat.T @ dk.reshape(-1, width)
        grads[f"layers.{i}.wv"] = a_flat.T @ dv.reshape(-1, width)
        da = dq @ lw.wq.T + dk @ lw.wk.T + dv @ lw.wv.T
        dxin_norm, grads[f"layers.{i}.norm_attn"] = _rmsnorm_bwd(lc["x_in"], lw.norm_attn, lc["r1"], da)
        dx = dx_mid + dxin_norm

    grads["embed"] = np.zeros_like(model.embed)
    np.add.at(grads["embed"], c["tokens"], dx)
    return loss, grads


def training_stream(corpora: dict) -> np.ndarray:
    """All task token sequences concatenated in deterministic order."""
    parts = [seq for task_id in sorted(corpora) for seq in corpora[task_id].token_sequences]
    stream = np.concatenate([p for p in parts if p.size]) if parts else np.array([], dtype=np.int64)
    if stream.size == 0:
        raise ValueError("training stream is empty")
    return stream.astype(np.int64)


def _sample_windows(stream: np.ndarray, seq_len: int, batch_size: int, rng) -> np.ndarray:
    need = seq_len + 1
    if stream.size < need:
        stream = np.tile(stream, math.ceil(need / stream.size))
    starts = rng.integers(0, stream.size - seq_len, size=batch_size)
    return np.stack([stream[s : s + need] for s in starts])


def train_tiny(
    model: TinyModel,
    corpora: dict,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
    seq_len: int | None = None,
) -> TinyModel:
    """Plain SGD on next-token cross-entropy. Deterministic given the seed."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    out = model.copy()
    if steps == 0:
        return out
    if seq_len is None:
        seq_len = min(model.config.max_seq, 48)
    if seq_len > model.config.max_seq:
        raise ValueError("seq_len exceeds max_seq")
    stream = training_stream(corpora)
    rng = np.random.default_rng(seed)
    params = _param_arrays(out)
    for step in range(steps):
        batch = _sample_windows(stream, seq_len, batch_size, rng)
        loss, grads = loss_and_grads(out, batch[:, :-1], batch[:, 1:])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        for name, arr in params.items():
            arr -= np.float32(lr) * grads[name]
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise DivergenceError(f"non-finite weights in {name} after {steps} steps")
    return out


def stream_xent(model: TinyModel, corpora: dict, seed: int = 0, n_batches: int = 8,
                batch_size: int = 8, seq_len: int | None = None) -> float:
    """Mean next-token cross-entropy over sampled windows (no updates)."""
    if seq_len is None:
        seq_len = min(model.config.max_seq, 48)
    stream = training_stream(corpora)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(n_batches):
        batch = _sample_windows(stream, seq_len, batch_size, rng)
        logits, _ = _forward_batch(model, batch[:, :-1])
        loss, _ = _xent_and_dlogits(logits, batch[:, 1:])
        losses.append(loss)
    return float(np.mean(losses))


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(model: TinyModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "format": "tiny-checkpoint",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "fingerprint": model.fingerprint(),
    }
    meta.update(extra_meta or {})
    save_npz(path, meta, _weight_arrays(model))


def load_checkpoint(path) -> TinyModel:
    meta, arrays = load_npz(path)
    expect_format(meta, "tiny-checkpoint", path)
    cfg = ModelConfig(**meta["config"])
    try:
        layers = [
            LayerWeights(**{f: np.asarray(arrays[f"layers.{i}.{f}"], dtype=np.float32) for f in _LAYER_FIELDS})
            for i in range(cfg.n_layers)
        ]
        model = TinyModel(
            config=cfg,
            embed=np.asarray(arrays["embed"], dtype=np.float32),
            layers=layers,
            norm_out=np.asarray(arrays["norm_out"], dtype=np.float32),
            w_out=np.asarray(arrays["w_out"], dtype=np.float32),
        )
    except KeyError as e:
        raise ArtifactError(f"{path}: missing weight array {e.args[0]!r}") from None
    if model.fingerprint() != meta["fingerprint"]:
        raise ArtifactError(f"{path}: checkpoint content does not match its fingerprint")
    return model
