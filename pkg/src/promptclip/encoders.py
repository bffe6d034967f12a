"""Text and image towers producing unit vectors in a shared space.

The text tower is a frozen toy backend (hashed vocabulary + optional tiny
causal transformer) fed with a hybrid prompt::

    [prefix_1 tokens] [soft prompt rows] [prefix_2 tokens] [caption tokens]

followed by pooling and a trainable two-layer projection head. The image
tower is a trainable two-layer MLP over precomputed feature vectors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_PHRASE = (
    "Create a dense embedding that represents the medical meaning of this text for image retrieval."
)
NORM_EPS = 1e-12


class PromptOverflowError(ValueError):
    pass


def normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Row-wise L2 normalization with ``eps`` inside the square root."""
    return x / torch.sqrt((x * x).sum(dim=-1, keepdim=True) + eps)


@lru_cache(maxsize=65536)
def _hash_words(text: str, vocab_size: int) -> tuple:
    ids = []
    for word in text.split():
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        ids.append(int.from_bytes(digest, "little") % vocab_size)
    return tuple(ids)


class HashTokenizer:
    """Whitespace words hashed into a fixed vocabulary (deterministic across runs)."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def tokenize(self, text: str) -> list:
        return list(_hash_words(text, self.vocab_size))


@dataclass
class BackendSpec:
    tier: str = "transformer"  # "transformer" (last-position pooling) or "minimal" (mean pooling)
    vocab_size: int = 8192
    width: int = 32
    n_layers: int = 1
    n_heads: int = 2
    max_context: int = 4096
    seed: int = 20240601

    def __post_init__(self):
        if self.tier not in ("transformer", "minimal"):
            raise ValueError(f"unknown backend tier {self.tier!r}")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")


class _CausalBlock(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L, D = x.shape
        d = D // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).view(L, 3, self.n_heads, d).permute(1, 2, 0, 3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        causal = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        y = (scores.softmax(dim=-1) @ v).transpose(0, 1).reshape(L, D)
        x = x + self.proj(y)
        return x + self.mlp(self.ln2(x))


def _sinusoid(length: int, width: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    pe = torch.zeros(length, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype=dtype, device=device)


class ToyTextBackend(nn.Module):
    """Frozen, fixed-seed stand-in for a large embedding model.

    Parameters are drawn from ``spec.seed`` at construction and never receive
    gradients; gradients still flow *through* it into input embeddings.
    """

    frozen = True

    def __init__(self, spec: BackendSpec | None = None):
        super().__init__()
        self.spec = spec or BackendSpec()
        self.tokenizer = HashTokenizer(self.spec.vocab_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.spec.seed)
            self.token_embedding = nn.Embedding(self.spec.vocab_size, self.spec.width)
            # end-of-text row appended by pool() on the transformer tier
            self.eos = nn.Parameter(torch.randn(self.spec.width))
            blocks = self.spec.n_layers if self.spec.tier == "transformer" else 0
            self.blocks = nn.ModuleList(_CausalBlock(self.spec.width, self.spec.n_heads) for _ in range(blocks))
            self.ln_final = nn.LayerNorm(self.spec.width) if blocks else nn.Identity()
        self.requires_grad_(False)
        self.eval()

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def max_context(self) -> int:
        return self.spec.max_context

    def train(self, mode: bool = True):
        # no dropout or batch statistics; stays in eval mode
        return super().train(False)

    def tokenize(self, text: str) -> list:
        return self.tokenizer.tokenize(text)

    def embed_tokens(self, ids: Sequence[int]) -> torch.Tensor:
        idx = torch.as_tensor(list(ids), dtype=torch.long, device=self.token_embedding.weight.device)
        return self.token_embedding(idx)

    def pool(self, seq: torch.Tensor) -> torch.Tensor:
        if not self.blocks:
            return seq.mean(dim=0)
        seq = torch.cat([seq, self.eos.to(seq.dtype).unsqueeze(0)])
        x = seq + _sinusoid(seq.shape[0], seq.shape[1], seq.dtype, seq.device)
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x)[-1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class PromptTemplate:
    prefix_1: str = "Instruct:"
    prefix_2: str = "query:"


class SoftPrompt(nn.Module):
    def __init__(self, vectors: torch.Tensor, init_phrase: str = ""):
        super().__init__()
        self.vectors = nn.Parameter(vectors.detach().clone())
        self.init_phrase = init_phrase

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def empty(cls, width: int) -> "SoftPrompt":
        return cls(torch.zeros(0, width), "")


def init_soft_prompt_from_phrase(backend: ToyTextBackend, phrase: str) -> SoftPrompt:
    """Soft prompt whose rows are the backend's token embeddings of ``phrase``."""
    ids = backend.tokenize(phrase)
    if not ids:
        raise ValueError("soft prompt phrase must contain at least one token")
    with torch.no_grad():
        rows = backend.embed_tokens(ids)
    return SoftPrompt(rows, phrase)


def assemble_prompt(backend: ToyTextBackend, template: PromptTemplate, prompt: SoftPrompt, caption: str,
                    caption_limit: int | None = None) -> torch.Tensor:
    """Embedding sequence of length L1 + K + L2 + Lc in template order.

    Soft-prompt rows enter by reference, so gradients reach ``prompt.vectors``
    only through positions L1 .. L1+K-1.
    """
    cap_ids = backend.tokenize(caption)
    if not cap_ids:
        raise ValueError("caption must contain at least one token")
    if caption_limit is not None:
        cap_ids = cap_ids[:caption_limit]
    p1 = backend.tokenize(template.prefix_1)
    p2 = backend.tokenize(template.prefix_2)
    total = len(p1) + prompt.K + len(p2) + len(cap_ids)
    if total > backend.max_context:
        raise PromptOverflowError(
            f"prompt length {total} (prefix_1={len(p1)}, K={prompt.K}, prefix_2={len(p2)}, "
            f"caption={len(cap_ids)}) exceeds max_context={backend.max_context}"
        )
    vecs = prompt.vectors.to(backend.token_embedding.weight.dtype)
    return torch.cat([backend.embed_tokens(p1), vecs, backend.embed_tokens(p2), backend.embed_tokens(cap_ids)])


class ProjectionHead(nn.Module):
    """Two affine layers with GELU between; adapts backend width to the shared space."""

    def __init__(self, in_width: int, out_width: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_width
        self.fc1 = nn.Linear(in_width, hidden)
        self.fc2 = nn.Linear(hidden, out_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ImageEncoder(nn.Module):
    """Toy image tower: two-layer MLP over precomputed feature vectors."""

    def __init__(self, in_width: int, out_width: int, hidden: int = 32):
        super().__init__()
        self.in_width = in_width
        self.fc1 = nn.Linear(in_width, hidden)
        self.fc2 = nn.Linear(hidden, out_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ValueError(f"image features have width {x.shape[-1]}, encoder expects {self.in_width}")
        return self.fc2(F.gelu(self.fc1(x)))


def encode_text(backend: ToyTextBackend, template: PromptTemplate, prompt: SoftPrompt, head: ProjectionHead,
                caption: str, caption_limit: int | None = None) -> torch.Tensor:
    seq = assemble_prompt(backend, template, prompt, caption, caption_limit)
    return normalize(head(backend.pool(seq)))


def encode_image(encoder: ImageEncoder, image) -> torch.Tensor:
    """Unit vector for a feature vector, array, or ``.npy``/``.json`` path."""
    if isinstance(image, (str, Path)):
        from .corpus import load_image_features

        image = load_image_features(str(image))
    param = encoder.fc1.weight
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image, dtype=param.dtype,
                        device=param.device)
    return normalize(encoder(x))


class Temperature(nn.Module):
    """Learnable softmax temperature stored as log(tau), so tau > 0 always."""

    def __init__(self, tau: float = 0.07, log_cap: float | None = None):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))
        self.log_cap = log_cap

    @property
    def tau(self) -> torch.Tensor:
        log_tau = self.log_tau
        if self.log_cap is not None:
            log_tau = log_tau.clamp(-self.log_cap, self.log_cap)
        return log_tau.exp()


@dataclass
class ModelConfig:
    backend: BackendSpec = field(default_factory=BackendSpec)
    embed_dim: int = 16
    image_in: int = 16
    image_hidden: int = 32
    head_hidden: int | None = None
    prefix_1: str = "Instruct:"
    prefix_2: str = "query:"
    init_phrase: str = DEFAULT_PHRASE
    use_soft_prompt: bool = True
    caption_token_limit: int | None = None
    tau_init: float = 0.07
    log_tau_cap: float | None = None

    @classmethod
    def for_ablation(cls, use_llm_backend: bool = True, use_learnable_prompt: bool = True, **kw) -> "ModelConfig":
        """Configurations of the ablation grid.

        Without the LLM-style backend the text tower falls back to a plain
        CLIP-like path: mean-pooled embedding table, no instruction prefixes,
        captions truncated to 77 tokens, and no soft prompt unless prompt
        learning is requested.
        """
        backend = kw.pop("backend", None) or BackendSpec()
        if use_llm_backend:
            backend = BackendSpec(**{**asdict(backend), "tier": "transformer"})
            return cls(backend=backend, **kw)
        backend = BackendSpec(**{**asdict(backend), "tier": "minimal"})
        kw.setdefault("caption_token_limit", 77)
        return cls(backend=backend, prefix_1="", prefix_2="", use_soft_prompt=use_learnable_prompt, **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["backend"] = BackendSpec(**raw["backend"])
        return cls(**raw)


class DualEncoder(nn.Module):
    """Frozen text backend + soft prompt + projection head, image MLP, temperature."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.backend = ToyTextBackend(config.backend)
        self.template = PromptTemplate(config.prefix_1, config.prefix_2)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if config.use_soft_prompt:
                self.prompt = init_soft_prompt_from_phrase(self.backend, config.init_phrase)
            else:
                self.prompt = SoftPrompt.empty(config.backend.width)
            self.head = ProjectionHead(config.backend.width, config.embed_dim, config.head_hidden)
            self.image_encoder = ImageEncoder(config.image_in, config.embed_dim, config.image_hidden)
        self.temperature = Temperature(config.tau_init, config.log_tau_cap)

    def trainable_parameters(self, learnable_prompt: bool = True) -> dict:
        """Name -> parameter for the trainable partition (never the backend)."""
        params = {}
        if learnable_prompt and self.prompt.K:
            params["prompt.vectors"] = self.prompt.vectors
        params.update({f"head.{n}": p for n, p in self.head.named_parameters()})
        params.update({f"image_encoder.{n}": p for n, p in self.image_encoder.named_parameters()})
        params["temperature.log_tau"] = self.temperature.log_tau
        return params

    def checkpoint_tensors(self) -> dict:
        """Every non-backend tensor, in a fixed order (prompt included even when frozen)."""
        tensors = {"prompt.vectors": self.prompt.vectors}
        tensors.update(self.trainable_parameters(learnable_prompt=False))
        return tensors

    def encode_text(self, caption: str) -> torch.Tensor:
        return encode_text(self.backend, self.template, self.prompt, self.head, caption,
                           self.config.caption_token_limit)

    def encode_texts(self, captions: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.encode_text(c) for c in captions])

    def encode_images(self, features) -> torch.Tensor:
        return encode_image(self.image_encoder, features)

    @torch.no_grad()
    def embed_images(self, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Evaluation-mode image embeddings as float64 numpy rows."""
        feats = np.asarray(features, dtype=np.float64)
        out = [self.encode_images(feats[i:i + batch_size]).double().cpu().numpy()
               for i in range(0, len(feats), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim))
