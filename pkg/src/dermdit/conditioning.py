"""Prompt construction and text conditioning.

Metadata attributes become a fixed-template instruction, the instruction
becomes a descriptive prompt (via a template rewrite or an external
vision-language endpoint), and prompts become token-vector sequences that
the denoiser cross-attends over. The hash-stub encoder is fully
deterministic: each lowercase whitespace token is hashed with 64-bit
FNV-1a and the hash seeds a generator that emits one unit-norm Gaussian
vector, so the same text embeds identically on every platform.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ParamStore, Tensor, add, concat, matmul, reshape

__all__ = [
    "DIAGNOSES",
    "TONES_ISIC",
    "TONES_FST",
    "AttributeSet",
    "PromptRecord",
    "TextEmbedding",
    "render_instruction",
    "declarative_prompt",
    "generate_prompt",
    "TemplateClient",
    "VlmClient",
    "HashStubEncoder",
    "SidecarEncoder",
    "HttpEncoder",
    "embed_prompt",
    "build_condition_sequence",
    "write_sidecar",
    "read_sidecar",
    "prompt_digest",
    "fnv1a64",
]

DIAGNOSES = ("benign", "malignant")
TONES_ISIC = ("light", "brown", "dark")
TONES_FST = ("A", "B", "C")
SEXES = ("male", "female")

VLM_TOKEN_ENV = "DERMDIT_VLM_TOKEN"


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSet:
    """Metadata attributes attached to one image."""

    diagnosis: str
    skin_tone: str | None = None
    sex: str | None = None
    age: int | None = None
    site: str | None = None

    def __post_init__(self):
        if self.diagnosis not in DIAGNOSES:
            raise ConditioningError(
                f"diagnosis {self.diagnosis!r} not in {DIAGNOSES}"
            )
        if self.skin_tone is not None and self.skin_tone not in TONES_ISIC + TONES_FST:
            raise ConditioningError(
                f"skin_tone {self.skin_tone!r} not in {TONES_ISIC + TONES_FST}"
            )
        if self.sex is not None and self.sex not in SEXES:
            raise ConditioningError(f"sex {self.sex!r} not in {SEXES}")

    def tone_phrase(self) -> str:
        if self.skin_tone in TONES_FST:
            return f"type {self.skin_tone}"
        return str(self.skin_tone)

    def as_dict(self) -> dict:
        out = {"diagnosis": self.diagnosis}
        for key in ("skin_tone", "sex", "age", "site"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass(frozen=True)
class PromptRecord:
    image_id: str
    instruction_text: str
    prompt_text: str
    source: str  # "template" | "vlm"
    attributes: AttributeSet | None = None

    def __post_init__(self):
        if not self.prompt_text.strip():
            raise ConditioningError("prompt_text must be nonempty")
        if self.source not in ("template", "vlm"):
            raise ConditioningError(f"unknown prompt source {self.source!r}")


@dataclass(frozen=True)
class TextEmbedding:
    """Per-token conditioning vectors, shape [L, d_text] with L >= 1."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tokens)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ConditioningError(f"token array must be [L, d], got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConditioningError("token vectors must be finite")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# instruction / prompt templates
# ---------------------------------------------------------------------------

_TWO_ATTR = "{diagnosis} skin lesion on {tone} skin"
_FIVE_SUFFIX = " of a {sex} patient, age {age}, located on the {site}"


def _body(attrs: AttributeSet, regime: str) -> str:
    if attrs.skin_tone is None:
        raise ConditioningError("skin_tone required")
    body = _TWO_ATTR.format(diagnosis=attrs.diagnosis, tone=attrs.tone_phrase())
    if regime == "two_attr":
        return body
    if regime == "five_attr":
        for key in ("sex", "age", "site"):
            if getattr(attrs, key) is None:
                raise ConditioningError(f"{key} required")
        return body + _FIVE_SUFFIX.format(sex=attrs.sex, age=attrs.age, site=attrs.site)
    raise ConditioningError(f"unknown regime {regime!r}")


def render_instruction(attrs: AttributeSet, regime: str = "two_attr") -> str:
    """Canonical instruction string for a metadata set.

    Deterministic template; the five-attribute regime requires sex, age
    and site and raises naming the first missing one.
    """
    return f"Describe this dermoscopic image of a {_body(attrs, regime)}."


def declarative_prompt(attrs: AttributeSet, regime: str = "two_attr") -> str:
    """The instruction's declarative form, used as the template prompt."""
    return f"A dermoscopic image of a {_body(attrs, regime)}."


# ---------------------------------------------------------------------------
# prompt generation clients
# ---------------------------------------------------------------------------

class TemplateClient:
    """Offline stand-in for the captioning endpoint.

    Rewrites the imperative instruction into its declarative form without
    touching the network.
    """

    source = "template"

    _PREFIX = "Describe this "

    def caption(self, image_bytes: bytes, instruction: str) -> str:
        text = instruction.strip()
        if text.startswith(self._PREFIX):
            text = "A " + text[len(self._PREFIX):]
        return text


class VlmClient:
    """HTTP client for a chat-completions-style captioning endpoint.

    The request carries the instruction text and the image as base64;
    the bearer token comes from the DERMDIT_VLM_TOKEN environment
    variable. Responses are cached on disk by content digest so retries
    are idempotent. ``transport`` may be injected for testing; it takes
    (url, payload, headers, timeout) and returns the parsed JSON body.
    """

    source = "vlm"

    def __init__(
        self,
        endpoint: str,
        model: str = "llava",
        timeout: float = 60.0,
        retries: int = 2,
        cache_dir: str | Path | None = None,
        transport=None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._transport = transport or _requests_transport

    def _cache_path(self, digest: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{digest}.json"

    def caption(self, image_bytes: bytes, instruction: str) -> str:
        digest = hashlib.sha256(image_bytes + b"\x00" + instruction.encode()).hexdigest()
        cache = self._cache_path(digest)
        if cache is not None and cache.exists():
            return json.loads(cache.read_text())["prompt"]

        payload = {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": instruction},
                        {
                            "type": "image_url",
                            "image_url": {
                                "url": "data:image/png;base64,"
                                + base64.b64encode(image_bytes).decode()
                            },
                        },
                    ],
                }
            ],
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(VLM_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                body = self._transport(self.endpoint, payload, headers, self.timeout)
                text = body["choices"][0]["message"]["content"]
                break
            except Exception as exc:  # noqa: BLE001 - retried, then re-raised
                last_error = exc
                if attempt < self.retries:
                    time.sleep(min(2.0 ** attempt * 0.1, 2.0))
        else:
            raise ConditioningError(
                f"captioning endpoint {self.endpoint} failed after "
                f"{self.retries + 1} attempts: {last_error}"
            )

        if cache is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = cache.with_suffix(".tmp")
            tmp.write_text(json.dumps({"prompt": text}))
            tmp.replace(cache)
        return text


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    if resp.status_code != 200:
        raise ConditioningError(f"endpoint returned status {resp.status_code}")
    return resp.json()


def generate_prompt(
    image_bytes: bytes,
    instruction: str,
    client,
    image_id: str = "",
    attributes: AttributeSet | None = None,
) -> PromptRecord:
    """Obtain the per-image prompt from a captioning client.

    The client's response text is trimmed; an empty response is an error.
    """
    text = client.caption(image_bytes, instruction).strip()
    if not text:
        raise ConditioningError(f"empty prompt for image {image_id!r}")
    return PromptRecord(
        image_id=image_id,
        instruction_text=instruction,
        prompt_text=text,
        source=client.source,
        attributes=attributes,
    )


# ---------------------------------------------------------------------------
# text encoders
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def prompt_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


class HashStubEncoder:
    """Deterministic stand-in for an external text encoder.

    Tokenization is lowercase + whitespace split; each token's FNV-1a
    hash seeds a generator emitting one Gaussian vector, normalized to
    unit L2 norm. Vectors are cached per token.
    """

    name = "hash_stub"

    def __init__(self, d_text: int = 64, max_tokens: int = 77):
        self.d_text = d_text
        self.max_tokens = max_tokens
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(fnv1a64(token.encode("utf-8")))
            raw = rng.standard_normal(self.d_text)
            vec = (raw / np.linalg.norm(raw)).astype(np.float32)
            self._cache[token] = vec
        return vec

    def encode(self, text: str) -> TextEmbedding:
        tokens = text.lower().split()
        if not tokens:
            raise ConditioningError("cannot embed empty text")
        tokens = tokens[: self.max_tokens]
        return TextEmbedding(np.stack([self._vector(t) for t in tokens]))


class SidecarEncoder:
    """Reads per-token vectors from an embedding sidecar file."""

    name = "external"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._index = read_sidecar(self.path)

    def encode(self, text: str) -> TextEmbedding:
        if not text.strip():
            raise ConditioningError("cannot embed empty text")
        digest = prompt_digest(text)
        try:
            return TextEmbedding(self._index[digest])
        except KeyError:
            raise ConditioningError(
                f"sidecar {self.path} has no embedding for prompt "
                f"{text[:40]!r}... (digest {digest.hex()[:12]})"
            ) from None


class HttpEncoder:
    """Fetches per-token vectors from an embedding HTTP endpoint."""

    name = "external"

    def __init__(self, endpoint: str, timeout: float = 30.0, transport=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._transport = transport or _requests_transport

    def encode(self, text: str) -> TextEmbedding:
        if not text.strip():
            raise ConditioningError("cannot embed empty text")
        body = self._transport(self.endpoint, {"text": text}, {}, self.timeout)
        vectors = np.asarray(body["vectors"], dtype=np.float32)
        return TextEmbedding(vectors)


def embed_prompt(prompt_text: str, encoder) -> TextEmbedding:
    """Embed a prompt with the configured encoder (stub or external)."""
    if not prompt_text or not prompt_text.strip():
        raise ConditioningError("cannot embed empty text")
    return encoder.encode(prompt_text)


# ---------------------------------------------------------------------------
# embedding sidecar format
# ---------------------------------------------------------------------------
#
# binary layout: magic "DDEM", version u32; then per record:
#   prompt sha256 digest (32 bytes), L u32, d_text u32,
#   L * d_text little-endian float32 values.

_SIDECAR_MAGIC = b"DDEM"
_SIDECAR_VERSION = 1


def write_sidecar(path: str | Path, records: dict[bytes, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_SIDECAR_MAGIC)
        fh.write(struct.pack("<I", _SIDECAR_VERSION))
        for digest, tokens in records.items():
            tokens = np.ascontiguousarray(tokens, dtype="<f4")
            if len(digest) != 32:
                raise ConditioningError("prompt digest must be 32 bytes")
            L, d = tokens.shape
            fh.write(digest)
            fh.write(struct.pack("<II", L, d))
            fh.write(tokens.tobytes())
    tmp.replace(path)


def read_sidecar(path: str | Path) -> dict[bytes, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _SIDECAR_MAGIC:
        raise ConditioningError(f"{path} is not an embedding sidecar")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _SIDECAR_VERSION:
        raise ConditioningError(
            f"sidecar version {version}, expected {_SIDECAR_VERSION}"
        )
    index: dict[bytes, np.ndarray] = {}
    offset = 8
    while offset < len(blob):
        digest = blob[offset : offset + 32]
        L, d = struct.unpack_from("<II", blob, offset + 32)
        offset += 40
        count = L * d
        vectors = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        index[digest] = vectors.reshape(L, d).copy()
    return index


# ---------------------------------------------------------------------------
# condition sequence
# ---------------------------------------------------------------------------

def build_condition_sequence(
    t_embed: Tensor, text: TextEmbedding, proj: ParamStore
) -> Tensor:
    """Prepend the timestep embedding to the projected text tokens.

    Row 0 is the timestep embedding unchanged; rows 1..L are the text
    tokens mapped through the d_text -> d_model projection.
    """
    w, b = proj["w"], proj["b"]
    d_model = t_embed.shape[-1]
    if w.shape[0] != text.dim or w.shape[1] != d_model:
        raise ConditioningError(
            f"projection {w.shape} incompatible with text dim {text.dim} "
            f"and model dim {d_model}"
        )
    projected = add(matmul(Tensor(text.tokens), w), b)
    row0 = reshape(t_embed, (1, d_model))
    return concat([row0, projected], axis=0)
