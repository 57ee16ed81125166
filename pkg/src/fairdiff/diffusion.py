"""Conditional DDPM on feature vectors, trained for classifier-free guidance.

Timesteps run ``t = T, ..., 1`` while sampling; ``t`` indexes the noise
schedule (``alpha_bar[t-1]`` is the cumulative product up to step t).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConceptLookupError, InputError, ParseError, SpecificationError
from .numerics import AdamState, Mlp, Rng, RngBank, adam_step, mlp_from_lines, mlp_to_lines
from .world import ATTRIBUTE_TOKENS, Dataset

NULL_TOKEN = "<null>"


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.betas)

    def check_t(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return int(t)


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear betas, endpoints included."""
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise SpecificationError(f"invalid schedule T={T} beta=[{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(betas, float(beta_start), float(beta_end))


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bars[sched.check_t(t) - 1]
    return np.sqrt(ab) * np.asarray(z0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def timestep_encoding(t, width: int = 8, T: int = 100) -> np.ndarray:
    """Sinusoidal (sin, cos) pairs; ``t`` scalar or array -> ``(..., width)``."""
    half = width // 2
    freqs = np.exp(-np.log(10.0 * T) * np.arange(half) / half)
    ang = np.asarray(t, dtype=float)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class ConditioningVocab:
    embeddings: dict[str, np.ndarray]
    null: np.ndarray

    @property
    def width(self) -> int:
        return self.null.shape[0]

    @classmethod
    def build(cls, tokens, width: int = 8, seed: int = 0) -> "ConditioningVocab":
        """Frozen random embeddings (Gaussian, rescaled to norm sqrt(width));
        the null token is the zero vector."""
        tokens = list(tokens)
        if NULL_TOKEN in tokens or len(set(tokens)) != len(tokens):
            raise SpecificationError("vocabulary tokens must be unique and not the null token")
        r = Rng(seed, stream=11)
        emb = {}
        for tok in tokens:
            v = r.gaussian(width)
            emb[tok] = v * (np.sqrt(width) / np.linalg.norm(v))
        return cls(emb, np.zeros(width))

    def __contains__(self, token):
        return token == NULL_TOKEN or token in self.embeddings

    def __getitem__(self, token) -> np.ndarray:
        if token == NULL_TOKEN or token is None:
            return self.null
        try:
            return self.embeddings[token]
        except KeyError:
            raise ConceptLookupError(f"concept {token!r} not in conditioning vocabulary") from None

    @property
    def concepts(self) -> list[str]:
        return [t for t in self.embeddings if t not in ATTRIBUTE_TOKENS]


@dataclass
class EpsilonModel:
    mlp: Mlp
    vocab: ConditioningVocab
    schedule: NoiseSchedule
    time_width: int = 8
    # RMS of the training data; z_t is divided by its expected RMS at t
    data_scale: float = 1.0
    # bound on the implied clean sample during sampling (None: no clipping)
    x0_clip: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.mlp.sizes[-1]

    @classmethod
    def init(cls, dim: int, tokens, seed: int = 0, hidden=(64, 64), time_width: int = 8,
             emb_width: int = 8, schedule: NoiseSchedule | None = None) -> "EpsilonModel":
        vocab = ConditioningVocab.build(tokens, emb_width, seed)
        sizes = (dim + time_width + emb_width, *hidden, dim)
        mlp = Mlp.init(sizes, Rng(seed, stream=12))
        return cls(mlp, vocab, schedule or make_schedule(), time_width)

    def inputs(self, z, t, cond) -> np.ndarray:
        """Network input ``[z, tau(t), c]``; ``cond`` is a token or an array of
        embeddings with one row per z row."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,)).astype(np.int64)
        ab = self.schedule.alpha_bars[t - 1]
        c_in = 1.0 / np.sqrt(ab * self.data_scale ** 2 + (1.0 - ab))
        temb = timestep_encoding(t, self.time_width, self.schedule.T)
        if isinstance(cond, str) or cond is None:
            c = np.broadcast_to(self.vocab[cond], (n, self.vocab.width))
        else:
            c = np.asarray(cond, dtype=float)
        return np.concatenate([z * c_in[:, None], temb, c], axis=1)

    def eps(self, z, t, cond=None) -> np.ndarray:
        """epsilon_theta(z_t, c); ``cond=None`` means the null token."""
        single = np.ndim(z) == 1
        out = self.mlp.forward(self.inputs(z, t, cond))
        return out[0] if single else out


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 128
    lr: float = 3e-3
    p_uncond: float = 0.1
    # share of conditioned draws captioned with the attribute token rather
    # than the concept; this is how edit concepts enter the vocabulary
    p_attr_caption: float = 0.3
    seed: int = 0
    # cosine decay of the learning rate to lr * lr_floor over all epochs
    lr_floor: float = 0.01
    # sampler clip bound = margin * max |training feature|; None disables
    clip_margin: Optional[float] = 1.15

    def __post_init__(self):
        if not 0.0 <= self.p_uncond < 1.0:
            raise SpecificationError("p_uncond must lie in [0, 1)")
        if not 0.0 <= self.p_attr_caption <= 1.0:
            raise SpecificationError("p_attr_caption must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise SpecificationError("invalid training hyper-parameters")
        if self.clip_margin is not None and self.clip_margin <= 0:
            raise SpecificationError("clip_margin must be positive")


@dataclass
class TrainResult:
    model: EpsilonModel
    losses: list[float]
    null_draws: int = 0


def train_epsilon(model: EpsilonModel, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Minimise ``||eps - eps_theta(z_t, tau(t), c)||^2`` with classifier-free
    conditioning dropout. Returns a new model; ``model`` is left untouched."""
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    x0 = dataset.features()
    if x0.shape[1] != model.dim:
        raise InputError(f"dataset dim {x0.shape[1]} != model dim {model.dim}")
    concepts = dataset.concept_labels()
    missing = sorted(set(concepts) - set(model.vocab.embeddings))
    if missing:
        raise ConceptLookupError(f"dataset concepts not in vocabulary: {missing}")
    attrs = dataset.attributes()
    attr_tok = [t for t in ATTRIBUTE_TOKENS if t in model.vocab.embeddings]
    use_attr = len(attr_tok) == 2 and cfg.p_attr_caption > 0
    concept_emb = np.array([model.vocab[c] for c in concepts])
    attr_emb = np.array([model.vocab[ATTRIBUTE_TOKENS[a]] for a in attrs]) if use_attr else None

    sched = model.schedule
    sqrt_ab = np.sqrt(sched.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bars)
    mlp = model.mlp.copy()
    work = EpsilonModel(mlp, model.vocab, sched, model.time_width, model.data_scale)
    params = mlp.params
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = Rng(cfg.seed, stream=21)
    n, d = x0.shape
    losses, null_draws = [], 0
    for epoch in range(cfg.epochs):
        frac = epoch / max(cfg.epochs - 1, 1)
        state.lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = np.argsort(rng.uniform(n), kind="stable")
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.size
            t = 1 + np.minimum((rng.uniform(b) * sched.T).astype(np.int64), sched.T - 1)
            eps = rng.gaussian(b * d).reshape(b, d)
            zt = sqrt_ab[t - 1, None] * x0[idx] + sqrt_1mab[t - 1, None] * eps
            u = rng.uniform(b)
            cond = concept_emb[idx].copy()
            if use_attr:
                cap = (u >= cfg.p_uncond) & (u < cfg.p_uncond + (1.0 - cfg.p_uncond) * cfg.p_attr_caption)
                cond[cap] = attr_emb[idx][cap]
            drop = u < cfg.p_uncond
            cond[drop] = model.vocab.null
            null_draws += int(drop.sum())
            inp = work.inputs(zt, t, cond)
            pred = mlp.forward(inp)
            diff = pred - eps
            loss = float(np.mean(diff ** 2))
            grads, _ = mlp.backward(inp, 2.0 * diff / diff.size)
            params, state = adam_step(state, params, grads)
            mlp = mlp.with_params(params)
            work.mlp = mlp
            total += loss * b
            count += b
        losses.append(total / count)
    clip = model.x0_clip
    if cfg.clip_margin is not None:
        clip = float(cfg.clip_margin * np.abs(x0).max())
    trained = EpsilonModel(mlp, model.vocab, model.schedule, model.time_width, model.data_scale, clip)
    return TrainResult(trained, losses, null_draws)


def guided_eps(model: EpsilonModel, z_t, t: int, concept: str, s_g: float,
               gamma: Optional[np.ndarray] = None) -> np.ndarray:
    """Classifier-free guided estimate plus an optional fair-guidance term:
    ``eps(z) + s_g * (eps(z, c_p) - eps(z)) + gamma``."""
    cond = model.vocab[concept]
    e_u = model.eps(z_t, t, None)
    e_c = model.eps(z_t, t, concept) if cond is not model.vocab.null else e_u
    out = e_u + s_g * (e_c - e_u)
    if gamma is not None:
        out = out + gamma
    return out


def _clip_eps(z, eb, abar_t: float, bound: float) -> np.ndarray:
    x0 = (z - np.sqrt(1.0 - abar_t) * eb) / np.sqrt(abar_t)
    clipped = np.clip(x0, -bound, bound)
    hit = clipped != x0
    if not hit.any():
        return eb
    return np.where(hit, (z - np.sqrt(abar_t) * clipped) / np.sqrt(1.0 - abar_t), eb)


GammaProvider = Callable[[np.ndarray, int, RngBank], Optional[np.ndarray]]


def sample(model: EpsilonModel, concept: str, s_g: float, n: int, seed: int,
           gamma_provider: GammaProvider | None = None) -> np.ndarray:
    """Ancestral DDPM sampling of ``n`` chains from ``z_T ~ N(0, I)``.

    Chain ``i`` draws its noise from ``Rng(seed, 0).split(i)``. When the model
    carries ``x0_clip``, any coordinate of the implied clean sample beyond the
    bound is clipped and the noise estimate re-derived from it; rows where
    nothing is clipped are untouched. This keeps strongly guided chains from
    running away outside the data range.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    model.vocab[concept]
    sched = model.schedule
    betas, alphas, abar = sched.betas, sched.alphas, sched.alpha_bars
    bank = RngBank(Rng(seed, stream=0), n)
    d = model.dim
    z = bank.gaussian(d)
    for t in range(sched.T, 0, -1):
        gamma = gamma_provider(z, t, bank) if gamma_provider is not None else None
        eb = guided_eps(model, z, t, concept, s_g, gamma)
        if model.x0_clip is not None:
            eb = _clip_eps(z, eb, abar[t - 1], model.x0_clip)
        z = (z - (betas[t - 1] / np.sqrt(1.0 - abar[t - 1])) * eb) / np.sqrt(alphas[t - 1])
        if t > 1:
            z = z + np.sqrt(betas[t - 1]) * bank.gaussian(d)
    return z


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def _fmt(vals) -> str:
    return " ".join("%.17g" % v for v in np.ravel(vals))


def model_to_text(model: EpsilonModel) -> str:
    lines = mlp_to_lines(model.mlp)
    lines.append(f"VOCAB {len(model.vocab.embeddings)}")
    for tok, v in model.vocab.embeddings.items():
        lines.append(f"{tok}\t{_fmt(v)}")
    lines.append(f"NULLTOK {_fmt(model.vocab.null)}")
    s = model.schedule
    lines.append(f"SCHED {s.T} {s.beta_start!r} {s.beta_end!r}")
    lines.append(f"DATASCALE {model.data_scale!r}")
    lines.append(f"X0CLIP {'none' if model.x0_clip is None else repr(model.x0_clip)}")
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> EpsilonModel:
    lines = text.splitlines()
    mlp, pos = mlp_from_lines(lines)
    try:
        head = lines[pos].split()
        if head[0] != "VOCAB":
            raise ParseError("expected VOCAB block", line=pos + 1)
        count = int(head[1])
        emb = {}
        for i in range(count):
            tok, vals = lines[pos + 1 + i].split("\t")
            emb[tok] = np.array([float(v) for v in vals.split()])
        pos += 1 + count
        null_fields = lines[pos].split()
        if null_fields[0] != "NULLTOK":
            raise ParseError("expected NULLTOK line", line=pos + 1)
        null = np.array([float(v) for v in null_fields[1:]])
        sched_fields = lines[pos + 1].split()
        if sched_fields[0] != "SCHED":
            raise ParseError("expected SCHED line", line=pos + 2)
        sched = make_schedule(int(sched_fields[1]), float(sched_fields[2]), float(sched_fields[3]))
        data_scale, clip = 1.0, None
        for extra in lines[pos + 2:]:
            key, _, value = extra.partition(" ")
            if key == "DATASCALE":
                data_scale = float(value)
            elif key == "X0CLIP":
                clip = None if value.strip() == "none" else float(value)
            elif extra.strip():
                raise ParseError(f"unexpected checkpoint line {extra!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed diffusion checkpoint: {exc}", line=pos + 1) from None
    vocab = ConditioningVocab(emb, null)
    time_width = mlp.sizes[0] - mlp.sizes[-1] - vocab.width
    if time_width < 2 or time_width % 2:
        raise ParseError("layer sizes inconsistent with vocabulary width")
    return EpsilonModel(mlp, vocab, sched, time_width, data_scale, clip)


def save_model(model: EpsilonModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model_to_text(model))


def load_model(path) -> EpsilonModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_text(fh.read())
