"""Shared + parallel-encoder streaming Transformer acoustic model.

Layout::

    features -> input proj + positions -> shared stack --+--> PE[A] --> head[A]
                                                         +--> PE[B] --> head[B]
                                                         +--> LID   --> {A, B, sil}

In ``aux`` mode the two PE outputs are concatenated into a shared bilingual
head.  In ``lid`` mode they are mixed frame by frame with the LID
probabilities (silence renormalised away) and fed to a single combined head.

Attention is chunk-streaming: a frame sees every earlier frame (optionally
capped by ``left_context_frames``) plus the frames of its own chunk.  Two
forward paths exist: the taped one used for training, and an exact numpy one
used for inference whose per-frame results are bit-identical whether the
utterance arrives whole or chunk by chunk.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .lexicon import FOREIGN_ID, BilingualSpaceMap

LID_CLASSES = 3  # primary locale, secondary locale, silence
LID_SIL = 2


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    n_shared_layers: int = 4
    n_pe_layers: int = 2
    n_lid_layers: int = 1
    chunk_frames: int | None = 8
    left_context_frames: int | None = None
    locales: tuple = ("A", "B")
    combination_mode: str = "aux"
    seed: int = 0

    def __post_init__(self):
        self.locales = tuple(self.locales)
        self.validate()

    def validate(self):
        errs = []
        if self.model_dim % self.heads:
            errs.append(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        for k in ("feature_dim", "model_dim", "heads", "ff_dim", "n_shared_layers", "n_pe_layers", "n_lid_layers"):
            if getattr(self, k) < 1:
                errs.append(f"{k} must be >= 1")
        if self.chunk_frames is not None and self.chunk_frames < 1:
            errs.append("chunk_frames must be >= 1 (or None for whole-utterance)")
        if self.left_context_frames is not None and self.left_context_frames < 0:
            errs.append("left_context_frames must be >= 0")
        if len(self.locales) != 2 or self.locales[0] == self.locales[1]:
            errs.append("locales must be two distinct ids")
        if self.combination_mode not in ("aux", "lid"):
            errs.append("combination_mode must be 'aux' or 'lid'")
        if errs:
            raise ModelError("; ".join(errs))

    def to_dict(self):
        d = asdict(self)
        d["locales"] = list(self.locales)
        return d


def stream_mask(frames, chunk_frames=None, left_context=None):
    """Boolean ``[frames, frames]`` visibility: row t may attend to column j."""
    t = np.arange(frames)
    c = frames if chunk_frames is None else chunk_frames
    start = (t // c) * c if frames else t
    end = np.minimum(start + c, frames)
    lo = np.zeros(frames, dtype=np.int64) if left_context is None else np.maximum(start - left_context, 0)
    j = t[None, :]
    return (j < end[:, None]) & (j >= lo[:, None])


def chunk_windows(frames, chunk_frames=None, left_context=None):
    """(chunk start, chunk end, first visible key) for each chunk."""
    c = max(frames, 1) if chunk_frames is None else chunk_frames
    out = []
    for s in range(0, frames, c):
        lo = 0 if left_context is None else max(s - left_context, 0)
        out.append((s, min(s + c, frames), lo))
    return out


def sinusoid(positions, dim):
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(dim)
    rate = np.power(10000.0, -(2 * (i // 2)) / dim)
    ang = pos * rate[None, :]
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def soft_combine(h_a, h_b, lid_probs, floor=1e-8):
    """Mix PE outputs with LID weights after dropping the silence class.

    Per frame ``w_a = p_a / (p_a + p_b)``, ``w_b = p_b / (p_a + p_b)``; when the
    two locale probabilities are both (nearly) zero the weights are 0.5 each.
    Gradients flow into both hidden streams and the LID probabilities.
    """
    h_a, h_b, lid_probs = nc.as_tensor(h_a), nc.as_tensor(h_b), nc.as_tensor(lid_probs)
    if h_a.shape != h_b.shape or lid_probs.shape[:-1] != h_a.shape[:-1]:
        raise ModelError(f"soft_combine shape mismatch: {h_a.shape}, {h_b.shape}, {lid_probs.shape}")
    w_a, w_b, small, s = combine_weights(lid_probs.data, floor)
    out = w_a[..., None] * h_a.data + w_b[..., None] * h_b.data

    def bw(g):
        nc._accum(h_a, g * w_a[..., None])
        nc._accum(h_b, g * w_b[..., None])
        if lid_probs.requires_grad:
            ga = (g * h_a.data).sum(-1)
            gb = (g * h_b.data).sum(-1)
            s2 = np.where(small, 1.0, s * s)
            p = lid_probs.data
            gp = np.zeros_like(p)
            gp[..., 0] = np.where(small, 0.0, p[..., 1] * (ga - gb) / s2)
            gp[..., 1] = np.where(small, 0.0, p[..., 0] * (gb - ga) / s2)
            nc._accum(lid_probs, gp)

    return nc._record(out, (h_a, h_b, lid_probs), bw)


def combine_weights(p, floor=1e-8):
    p = np.asarray(p, dtype=np.float64)
    s = p[..., 0] + p[..., 1]
    small = s < floor
    safe = np.where(small, 1.0, s)
    w_a = np.where(small, 0.5, p[..., 0] / safe)
    w_b = np.where(small, 0.5, p[..., 1] / safe)
    return w_a, w_b, small, s


@dataclass
class ForwardOutput:
    bilingual: nc.Tensor | None = None  # log-posteriors over the bilingual inventory
    per_locale: dict = field(default_factory=dict)  # locale -> log-posteriors
    lid_logp: nc.Tensor | None = None
    pe_hidden: dict = field(default_factory=dict)
    shared_hidden: nc.Tensor | None = None

    @property
    def lid_probs(self):
        return None if self.lid_logp is None else np.exp(self.lid_logp.data)


@dataclass
class StreamState:
    caches: dict = field(default_factory=dict)  # (stack, layer) -> (keys, values)
    consumed: int = 0  # frames already turned into outputs
    pending: np.ndarray | None = None
    finished: bool = False


class AcousticModel:
    def __init__(self, config: ModelConfig, space: BilingualSpaceMap, store: nc.ParameterStore | None = None):
        if tuple(space.locales) != tuple(config.locales):
            raise ModelError(f"space locales {space.locales} differ from config locales {config.locales}")
        self.config = config
        self.space = space
        self.n_bilingual = len(space.bilingual)
        self.n_locale = {loc: len(space.per_locale[loc]) for loc in config.locales}
        if store is None:
            store = nc.ParameterStore()
            self._init_params(store, np.random.default_rng(config.seed))
        else:
            expected = self._param_shapes()
            got = {n: p.shape for n, p in store}
            if got != expected:
                missing = sorted(set(expected) ^ set(got))[:5]
                raise ModelError(f"parameter store does not match the model layout (e.g. {missing})")
        self.store = store
        self.history: list[str] = []  # completed training stages
        self.steps: dict[str, int] = {}

    # ------------------------------------------------------------ parameters

    def _layer_shapes(self, prefix):
        d, f = self.config.model_dim, self.config.ff_dim
        out = {}
        out[f"{prefix}.ln1.g"] = (d,)
        out[f"{prefix}.ln1.b"] = (d,)
        for m in ("q", "k", "v", "o"):
            out[f"{prefix}.attn.w{m}"] = (d, d)
            out[f"{prefix}.attn.b{m}"] = (d,)
        out[f"{prefix}.ln2.g"] = (d,)
        out[f"{prefix}.ln2.b"] = (d,)
        out[f"{prefix}.ff.w1"] = (d, f)
        out[f"{prefix}.ff.b1"] = (f,)
        out[f"{prefix}.ff.w2"] = (f, d)
        out[f"{prefix}.ff.b2"] = (d,)
        return out

    def stacks(self):
        """Stack name -> number of layers, in evaluation order."""
        cfg = self.config
        out = {"shared": cfg.n_shared_layers}
        for loc in cfg.locales:
            out[f"pe.{loc}"] = cfg.n_pe_layers
        if cfg.combination_mode == "lid":
            out["lid"] = cfg.n_lid_layers
        return out

    def _param_shapes(self):
        cfg = self.config
        d = cfg.model_dim
        shapes = {"in.w": (cfg.feature_dim, d), "in.b": (d,)}
        for stack, n in self.stacks().items():
            for i in range(n):
                shapes.update(self._layer_shapes(f"{stack}.{i}"))
            if stack != "shared":
                shapes[f"{stack}.ln_f.g"] = (d,)
                shapes[f"{stack}.ln_f.b"] = (d,)
        for loc in cfg.locales:
            shapes[f"head.{loc}.w"] = (d, self.n_locale[loc])
            shapes[f"head.{loc}.b"] = (self.n_locale[loc],)
        if cfg.combination_mode == "aux":
            shapes["head.shared.w"] = (2 * d, self.n_bilingual)
            shapes["head.shared.b"] = (self.n_bilingual,)
        else:
            shapes["lid.out.w"] = (d, LID_CLASSES)
            shapes["lid.out.b"] = (LID_CLASSES,)
            shapes["head.combined.w"] = (d, self.n_bilingual)
            shapes["head.combined.b"] = (self.n_bilingual,)
        return shapes

    def _init_params(self, store, rng):
        for name, shape in self._param_shapes().items():
            if len(shape) == 2:
                value = nc.glorot(rng, shape[0], shape[1])
            elif name.endswith(".g"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            store.add(name, value)

    def p(self, name):
        return self.store[name]

    def copy_stack(self, src, dst):
        """Overwrite stack ``dst``'s parameters with ``src``'s (same shapes)."""
        for name, t in self.store:
            if name.startswith(src + "."):
                self.store[dst + name[len(src):]].data = t.data.copy()

    def warm_start_combined(self):
        """Initialise the lid-mode combined head from the per-locale heads.

        Each bilingual unit's row is the mean of the matching rows of the
        locale heads that contain it, so that right after pretraining the
        combined path already decodes well when LID picks the right PE.
        """
        if self.config.combination_mode != "lid":
            raise ModelError("combined head exists only in lid mode")
        w = np.zeros_like(self.p("head.combined.w").data)
        b = np.zeros_like(self.p("head.combined.b").data)
        count = np.zeros(self.n_bilingual)
        for loc in self.config.locales:
            ids = self.space.maps[loc]
            have = ids != FOREIGN_ID
            w[:, have] += self.p(f"head.{loc}.w").data[:, ids[have]]
            b[have] += self.p(f"head.{loc}.b").data[ids[have]]
            count += have
        if (count == 0).any():
            raise ModelError("a bilingual unit belongs to no locale inventory")
        self.p("head.combined.w").data = w / count
        self.p("head.combined.b").data = b / count

    # ------------------------------------------------------------ taped path

    def _mask(self, frames, valid):
        cfg = self.config
        m = stream_mask(frames, cfg.chunk_frames, cfg.left_context_frames)
        if valid is None:
            return m
        valid = np.asarray(valid, dtype=bool)
        # pad query rows keep a visible key so their (ignored) rows stay finite
        return (m[None] & valid[:, None, :]) | (np.eye(frames, dtype=bool)[None] & ~valid[:, :, None])

    def _block(self, prefix, x, mask):
        p = self.p
        cfg = self.config
        h = nc.layer_norm(x, p(f"{prefix}.ln1.g"), p(f"{prefix}.ln1.b"))
        q = nc.linear(h, p(f"{prefix}.attn.wq"), p(f"{prefix}.attn.bq"))
        k = nc.linear(h, p(f"{prefix}.attn.wk"), p(f"{prefix}.attn.bk"))
        v = nc.linear(h, p(f"{prefix}.attn.wv"), p(f"{prefix}.attn.bv"))
        a = nc.masked_attention(q, k, v, cfg.heads, mask)
        x = x + nc.linear(a, p(f"{prefix}.attn.wo"), p(f"{prefix}.attn.bo"))
        h = nc.layer_norm(x, p(f"{prefix}.ln2.g"), p(f"{prefix}.ln2.b"))
        h = nc.gelu(nc.linear(h, p(f"{prefix}.ff.w1"), p(f"{prefix}.ff.b1")))
        return x + nc.linear(h, p(f"{prefix}.ff.w2"), p(f"{prefix}.ff.b2"))

    def _stack(self, stack, x, mask):
        for i in range(self.stacks()[stack]):
            x = self._block(f"{stack}.{i}", x, mask)
        if stack != "shared":
            x = nc.layer_norm(x, self.p(f"{stack}.ln_f.g"), self.p(f"{stack}.ln_f.b"))
        return x

    def _check_locale(self, locale):
        if locale not in self.config.locales:
            raise ModelError(f"unknown locale {locale!r}; model has {self.config.locales}")

    def forward_shared(self, features, valid=None):
        """Input projection, positions and the shared stack.

        ``features`` is ``[frames, feature_dim]`` or ``[batch, frames, feature_dim]``;
        ``valid`` marks real (non-pad) frames of a batch.
        """
        x = nc.as_tensor(features)
        if x.shape[-1] != self.config.feature_dim:
            raise ModelError(f"feature dim {x.shape[-1]} != configured {self.config.feature_dim}")
        frames = x.shape[-2]
        if frames == 0:
            return nc.Tensor(np.zeros(x.shape[:-1] + (self.config.model_dim,)))
        h = nc.linear(x, self.p("in.w"), self.p("in.b")) + sinusoid(np.arange(frames), self.config.model_dim)
        return self._stack("shared", h, self._mask(frames, valid))

    def forward_pe(self, locale, hidden, valid=None):
        self._check_locale(locale)
        hidden = nc.as_tensor(hidden)
        if hidden.shape[-2] == 0:
            return hidden
        return self._stack(f"pe.{locale}", hidden, self._mask(hidden.shape[-2], valid))

    def lid_forward(self, hidden, valid=None):
        """Per-frame log-probabilities over {primary, secondary, sil}."""
        if self.config.combination_mode != "lid":
            raise ModelError("this model has no LID head (combination_mode='aux')")
        hidden = nc.as_tensor(hidden)
        h = self._stack("lid", hidden, self._mask(hidden.shape[-2], valid))
        return nc.log_softmax(nc.linear(h, self.p("lid.out.w"), self.p("lid.out.b")))

    def project_bilingual(self, h_a, h_b):
        if self.config.combination_mode != "aux":
            raise ModelError("shared bilingual projection exists only in aux mode")
        z = nc.concat([h_a, h_b], axis=-1)
        return nc.log_softmax(nc.linear(z, self.p("head.shared.w"), self.p("head.shared.b")))

    def project_monolingual(self, locale, h):
        self._check_locale(locale)
        return nc.log_softmax(nc.linear(h, self.p(f"head.{locale}.w"), self.p(f"head.{locale}.b")))

    def project_combined(self, h):
        if self.config.combination_mode != "lid":
            raise ModelError("combined LID-mode head exists only in lid mode")
        return nc.log_softmax(nc.linear(h, self.p("head.combined.w"), self.p("head.combined.b")))

    def forward(self, features, valid=None, monolingual=True) -> ForwardOutput:
        """Every output of the model on a (batch of) utterance(s)."""
        la, lb = self.config.locales
        out = ForwardOutput()
        out.shared_hidden = hs = self.forward_shared(features, valid)
        ha = out.pe_hidden[la] = self.forward_pe(la, hs, valid)
        hb = out.pe_hidden[lb] = self.forward_pe(lb, hs, valid)
        if monolingual:
            out.per_locale = {la: self.project_monolingual(la, ha), lb: self.project_monolingual(lb, hb)}
        if self.config.combination_mode == "aux":
            out.bilingual = self.project_bilingual(ha, hb)
        else:
            out.lid_logp = self.lid_forward(hs, valid)
            probs = _exp(out.lid_logp)
            out.bilingual = self.project_combined(soft_combine(ha, hb, probs))
        return out

    # ------------------------------------------------------------ exact inference

    def _np(self, name):
        return self.store[name].data

    def _ln_np(self, x, prefix):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * (1.0 / np.sqrt(var + 1e-5)) * self._np(prefix + ".g") + self._np(prefix + ".b")

    def _lin_np(self, x, prefix_w, prefix_b):
        return nc.rowwise_matmul(x, self._np(prefix_w)) + self._np(prefix_b)

    def _attend_np(self, q, k, v):
        """Attention of chunk queries ``[c, D]`` over visible keys ``[w, D]``."""
        heads = self.config.heads
        d = q.shape[-1]
        dh = d // heads
        qh = np.ascontiguousarray(q.reshape(-1, heads, dh).transpose(1, 0, 2))
        kh = np.ascontiguousarray(k.reshape(-1, heads, dh).transpose(1, 0, 2))
        vh = np.ascontiguousarray(v.reshape(-1, heads, dh).transpose(1, 0, 2))
        s = np.einsum("hcd,hwd->hcw", qh, kh, optimize=False) * (1.0 / math.sqrt(dh))
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        pr = e / e.sum(axis=-1, keepdims=True)
        o = np.einsum("hcw,hwd->hcd", pr, vh, optimize=False)
        return np.ascontiguousarray(o.transpose(1, 0, 2).reshape(-1, d))

    def _layer_np(self, prefix, x, start, windows, cache):
        """One block over frames ``[start, start + len(x))``.

        ``windows`` lists (chunk start, chunk end, first visible key) in
        absolute frames; ``cache`` holds keys/values of earlier frames.
        """
        h = self._ln_np(x, f"{prefix}.ln1")
        q = self._lin_np(h, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
        k = self._lin_np(h, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
        v = self._lin_np(h, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
        if cache is not None and cache[0] is not None:
            keys, values = np.concatenate([cache[0], k]), np.concatenate([cache[1], v])
        else:
            keys, values = k, v
        base = start - (len(keys) - len(k))  # absolute frame of keys[0]
        att = np.empty_like(q)
        for cs, ce, lo in windows:
            att[cs - start:ce - start] = self._attend_np(
                q[cs - start:ce - start], keys[lo - base:ce - base], values[lo - base:ce - base]
            )
        x = x + self._lin_np(att, f"{prefix}.attn.wo", f"{prefix}.attn.bo")
        h = self._ln_np(x, f"{prefix}.ln2")
        u = self._lin_np(h, f"{prefix}.ff.w1", f"{prefix}.ff.b1")
        u = 0.5 * u * (1.0 + np.tanh(nc._GELU_C * u * (1.0 + 0.044715 * (u * u))))
        return x + self._lin_np(u, f"{prefix}.ff.w2", f"{prefix}.ff.b2"), (keys, values)

    def _run_np(self, feats, start, windows, caches):
        cfg = self.config
        keep = cfg.left_context_frames
        x = self._lin_np(feats, "in.w", "in.b") + sinusoid(np.arange(start, start + len(feats)), cfg.model_dim)
        hidden = {}
        for stack, n in self.stacks().items():
            h = x if stack == "shared" else hidden["shared"]
            for i in range(n):
                h, kv = self._layer_np(f"{stack}.{i}", h, start, windows, caches.get((stack, i)))
                if keep is not None:
                    # the next chunk sees at most ``keep`` frames before its start
                    drop = max(0, len(kv[0]) - keep)
                    kv = (kv[0][drop:], kv[1][drop:])
                caches[(stack, i)] = kv
            if stack != "shared":
                h = self._ln_np(h, f"{stack}.ln_f")
            hidden[stack] = h
        return self._heads_np(hidden)

    @staticmethod
    def _log_softmax_np(z):
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _heads_np(self, hidden):
        la, lb = self.config.locales
        ha, hb = hidden[f"pe.{la}"], hidden[f"pe.{lb}"]
        out = {
            f"mono-{loc}": self._log_softmax_np(self._lin_np(hidden[f"pe.{loc}"], f"head.{loc}.w", f"head.{loc}.b"))
            for loc in (la, lb)
        }
        if self.config.combination_mode == "aux":
            z = np.concatenate([ha, hb], axis=-1)
            out["bilingual"] = self._log_softmax_np(self._lin_np(z, "head.shared.w", "head.shared.b"))
        else:
            lid = self._log_softmax_np(self._lin_np(hidden["lid"], "lid.out.w", "lid.out.b"))
            out["lid"] = lid
            w_a, w_b, _, _ = combine_weights(np.exp(lid))
            comb = w_a[:, None] * ha + w_b[:, None] * hb
            out["lid-combined"] = self._log_softmax_np(self._lin_np(comb, "head.combined.w", "head.combined.b"))
        return out

    def modes(self):
        la, lb = self.config.locales
        if self.config.combination_mode == "aux":
            return ("bilingual", f"mono-{la}", f"mono-{lb}")
        return ("lid-combined", f"mono-{la}", f"mono-{lb}")

    def infer(self, features):
        """Whole-utterance inference without a tape.

        Returns a dict of log-posteriors per decoding mode (plus ``lid`` in lid
        mode).  Per-frame values match :meth:`streaming_forward` bit for bit.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.config.feature_dim:
            raise ModelError(f"expected [frames, {self.config.feature_dim}] features, got {feats.shape}")
        cfg = self.config
        if len(feats) == 0:
            return {k: np.zeros((0, v)) for k, v in self._out_widths().items()}
        windows = chunk_windows(len(feats), cfg.chunk_frames, cfg.left_context_frames)
        return self._run_np(feats, 0, windows, {})

    def _out_widths(self):
        la, lb = self.config.locales
        w = {f"mono-{la}": self.n_locale[la], f"mono-{lb}": self.n_locale[lb]}
        if self.config.combination_mode == "aux":
            w["bilingual"] = self.n_bilingual
        else:
            w["lid-combined"] = self.n_bilingual
            w["lid"] = LID_CLASSES
        return w

    def new_stream(self) -> StreamState:
        return StreamState(pending=np.zeros((0, self.config.feature_dim)))

    def streaming_outputs(self, chunk, state: StreamState, final=False):
        """Feed up to ``chunk_frames`` frames; return outputs for finished chunks.

        Frames are held until their chunk is complete (they may attend to each
        other), so a call can return fewer rows than it was given.  Pass
        ``final=True`` with the last piece to flush a trailing partial chunk;
        the stream is closed afterwards.
        """
        cfg = self.config
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1, cfg.feature_dim)
        if state.finished:
            raise ModelError("stream already finalised; start a new StreamState")
        if cfg.chunk_frames is not None and len(chunk) > cfg.chunk_frames:
            raise ModelError(f"chunk of {len(chunk)} frames exceeds chunk_frames={cfg.chunk_frames}")
        state.pending = np.concatenate([state.pending, chunk])
        outs = []
        size = cfg.chunk_frames
        while size is not None and len(state.pending) >= size:
            outs.append(self._stream_chunk(state, state.pending[:size]))
            state.pending = state.pending[size:]
        if final:
            if len(state.pending):
                outs.append(self._stream_chunk(state, state.pending))
                state.pending = state.pending[:0]
            state.finished = True
        widths = self._out_widths()
        if not outs:
            return {k: np.zeros((0, w)) for k, w in widths.items()}, state
        return {k: np.concatenate([o[k] for o in outs]) for k in widths}, state

    def _stream_chunk(self, state, feats):
        s = state.consumed
        e = s + len(feats)
        lo = 0 if self.config.left_context_frames is None else max(s - self.config.left_context_frames, 0)
        out = self._run_np(feats, s, [(s, e, lo)], state.caches)
        state.consumed = e
        return out

    def streaming_forward(self, chunk, state: StreamState, mode, final=False):
        """Log-posteriors of ``mode`` for the frames completed by this chunk."""
        if mode not in self.modes():
            raise ModelError(f"mode {mode!r} not available; choose from {self.modes()}")
        outs, state = self.streaming_outputs(chunk, state, final=final)
        return outs[mode], state

    # ------------------------------------------------------------ misc

    def clone(self) -> "AcousticModel":
        store = nc.ParameterStore()
        for name, t in self.store:
            store.add(name, t.data.copy())
            t2 = store[name]
            t2.requires_grad = t.requires_grad
        for name, st in self.store.state.items():
            store.state[name] = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in st.items()}
        m = AcousticModel(self.config, self.space, store)
        m.history = list(self.history)
        m.steps = dict(self.steps)
        return m


def _exp(logp):
    """exp of a taped tensor (used to turn LID log-probs into probs)."""
    logp = nc.as_tensor(logp)
    out = np.exp(logp.data)
    return nc._record(out, (logp,), lambda g: nc._accum(logp, g * out))
