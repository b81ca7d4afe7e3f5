"""Uniform completion interface over vision-language model backends.

One operation, :meth:`BackendRegistry.complete`, serves every model call in
the pipeline.  It enforces the prompt budget, consults a content-addressed
disk cache, and on a miss either performs an HTTP chat-completion call
(``http_chat``), replays the cache only (``mock_replay``), or generates a
deterministic synthetic reply (``mock_synthetic``) so full runs work offline.

Cache keys are request fingerprints: a sha256 over the canonical form of the
profile's generation-relevant fields, all prompt text, and the digests of the
image bytes (paths do not matter, content does).  Entries are single JSON
files under a two-level hex fan-out, written to a temp name and renamed, so
concurrent writers are safe.
"""

from __future__ import annotations

import base64
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .ioutil import atomic_write_text, canonical_json_bytes, dump_json, read_json, sha256_hex
from .prompting import (
    JUDGE_GOLD_HEADER,
    JUDGE_PRED_HEADER,
    CostModel,
    MessageList,
    estimate_budget,
)

BACKEND_KINDS = ("http_chat", "mock_replay", "mock_synthetic")


class BackendError(Exception):
    pass


class BudgetExceeded(BackendError):
    pass


class AuthMissing(BackendError):
    pass


class TransportFailure(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class UnreadableImage(BackendError):
    def __init__(self, uri: str, detail: str = ""):
        super().__init__(f"cannot read image {uri}: {detail}")
        self.uri = uri


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 250


@dataclass(frozen=True)
class RatePolicy:
    max_inflight: int = 2


@dataclass(frozen=True)
class WireShape:
    """Per-profile request-shape mapping for the HTTP chat dialect.

    The body is always an OpenAI-style chat completion with images inlined
    as base64 data URLs; vendors that differ only in auth header or response
    layout are covered by these three knobs.
    """

    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    response_text_path: tuple = ("choices", 0, "message", "content")


@dataclass(frozen=True)
class BackendProfile:
    name: str
    kind: str
    model_id: str
    limit_images: int
    limit_tokens: int
    endpoint: str = ""
    auth_env_var: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 2048
    cost_model: CostModel = field(default_factory=CostModel)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rate: RatePolicy = field(default_factory=RatePolicy)
    wire: WireShape = field(default_factory=WireShape)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http_chat":
            if not self.auth_env_var:
                raise ValueError(f"http_chat profile {self.name!r} must name an auth_env_var")
            if not self.endpoint:
                raise ValueError(f"http_chat profile {self.name!r} must set an endpoint")
        elif self.auth_env_var:
            raise ValueError(f"mock profile {self.name!r} must not name an auth_env_var")
        if self.limit_images < 1 or self.limit_tokens < 1:
            raise ValueError(f"profile {self.name!r} limits must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retry.max_attempts < 1 or self.rate.max_inflight < 1:
            raise ValueError("retry.max_attempts and rate.max_inflight must be >= 1")

    def core_fields(self) -> dict:
        """Generation-relevant fields; the only profile data hashed into
        fingerprints (name, limits, retry/rate and cost knobs are not)."""
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }


@dataclass
class Completion:
    text: str
    request_fingerprint: str
    profile_name: str
    from_cache: bool
    latency_ms: int


# --- fingerprinting ---------------------------------------------------------


def _image_bytes_digest(uri: str) -> str:
    try:
        return sha256_hex(Path(uri).read_bytes())
    except OSError as exc:
        raise UnreadableImage(uri, str(exc)) from exc


def fingerprint(profile: BackendProfile, prompt: MessageList) -> str:
    """64-hex request fingerprint, stable across processes and platforms."""
    messages = []
    for message in prompt.messages:
        segments = []
        for seg in message.segments:
            if seg.kind == "text":
                segments.append({"kind": "text", "text": seg.text})
            else:
                segments.append({
                    "kind": "image",
                    "sha256": _image_bytes_digest(seg.image.uri),
                    "width": seg.image.width_px,
                    "height": seg.image.height_px,
                })
        messages.append({"role": message.role, "segments": segments})
    payload = {"profile": profile.core_fields(), "messages": messages}
    return sha256_hex(canonical_json_bytes(payload))


# --- deterministic mock generation ------------------------------------------

_MOCK_VERBS = ("Click", "Type into", "Open", "Select", "Scroll to", "Press", "Hover over", "Close")
_MOCK_ADJECTIVES = ("blue", "gray", "primary", "left", "top", "highlighted", "small", "new")
_MOCK_NOUNS = (
    "button", "search field", "menu", "tab", "text box", "dropdown",
    "panel", "icon", "checkbox", "link",
)


def _extract_judge_blocks(prompt: MessageList | None) -> tuple[str | None, str | None]:
    if prompt is None:
        return None, None
    gold = pred = None
    for seg in prompt.iter_segments():
        if seg.kind != "text":
            continue
        if seg.text.startswith(JUDGE_GOLD_HEADER + "\n"):
            gold = seg.text[len(JUDGE_GOLD_HEADER) + 1:]
        elif seg.text.startswith(JUDGE_PRED_HEADER + "\n"):
            pred = seg.text[len(JUDGE_PRED_HEADER) + 1:]
    return gold, pred


def _mock_judge_verdict(rng: random.Random, prompt: MessageList | None) -> str:
    gold, pred = _extract_judge_blocks(prompt)
    if gold is not None and pred is not None:
        n_gold = len(gold.splitlines())
        n_pred = len(pred.splitlines())
        if gold == pred:
            return f"PRECISION: {n_pred}/{n_pred}\nRECALL: {n_gold}/{n_gold}\nORDER: {n_pred}/{n_pred}"
        matched = rng.randint(0, min(n_pred, n_gold))
        ordered = rng.randint(0, matched) if matched else 0
        return f"PRECISION: {matched}/{n_pred}\nRECALL: {matched}/{n_gold}\nORDER: {ordered}/{max(matched, 1)}"
    den = 16
    p, r = rng.randint(0, den), rng.randint(0, den)
    t = rng.randint(0, den)
    return f"PRECISION: {p}/{den}\nRECALL: {r}/{den}\nORDER: {t}/{den}"


def mock_generate(fp: str, purpose: str, prompt: MessageList | None = None) -> str:
    """Deterministic completion text for ``mock_synthetic`` profiles.

    SOP purposes yield a numbered procedure whose length and wording derive
    from the fingerprint; the judge purpose yields a parseable three-line
    verdict, and 1/1/1 fractions when the gold and predicted blocks in the
    prompt are byte-equal.
    """
    rng = random.Random(int(fp[:16], 16))
    if purpose == "judge":
        return _mock_judge_verdict(rng, prompt)
    n_steps = rng.randint(3, 8)
    lines = []
    for i in range(1, n_steps + 1):
        verb = rng.choice(_MOCK_VERBS)
        adj = rng.choice(_MOCK_ADJECTIVES)
        noun = rng.choice(_MOCK_NOUNS)
        token = format(rng.randrange(16 ** 4), "04x")
        lines.append(f"{i}. {verb} the {adj} {noun} labeled \"{token}\"")
    return "\n".join(lines)


# --- response cache ----------------------------------------------------------


class ResponseCache:
    """One JSON file per fingerprint under ``<dir>/<ab>/<cd>/<fp>.json``."""

    def __init__(self, cache_dir: Path | str):
        self.cache_dir = Path(cache_dir)

    def _path(self, fp: str) -> Path:
        return self.cache_dir / fp[:2] / fp[2:4] / f"{fp}.json"

    def read(self, fp: str) -> str | None:
        path = self._path(fp)
        if not path.is_file():
            return None
        try:
            entry = read_json(path)
        except (OSError, ValueError):
            return None
        # Soundness: entries carry their fingerprint; a mismatched or
        # incomplete entry is treated as a miss and regenerated.
        if entry.get("fingerprint") != fp or "text" not in entry:
            return None
        return entry["text"]

    def write(self, fp: str, profile: BackendProfile, text: str) -> None:
        entry = {
            "fingerprint": fp,
            "profile_core": profile.core_fields(),
            "text": text,
            "created_unix_ms": int(time.time() * 1000),
        }
        atomic_write_text(self._path(fp), dump_json(entry))


# --- HTTP dialect -------------------------------------------------------------

_MIME_BY_SUFFIX = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


def _encode_image(uri: str) -> str:
    try:
        data = Path(uri).read_bytes()
    except OSError as exc:
        raise UnreadableImage(uri, str(exc)) from exc
    mime = _MIME_BY_SUFFIX.get(Path(uri).suffix.lower(), "image/png")
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def build_request_body(profile: BackendProfile, prompt: MessageList) -> dict:
    messages = []
    for message in prompt.messages:
        content = []
        for seg in message.segments:
            if seg.kind == "text":
                content.append({"type": "text", "text": seg.text})
            else:
                content.append({
                    "type": "image_url",
                    "image_url": {"url": _encode_image(seg.image.uri)},
                })
        messages.append({"role": message.role, "content": content})
    return {
        "model": profile.model_id,
        "temperature": profile.temperature,
        "max_tokens": profile.max_output_tokens,
        "messages": messages,
    }


def _requests_transport(url: str, headers: dict, body: dict, timeout_s: float = 120.0):
    resp = requests.post(url, headers=headers, json=body, timeout=timeout_s)
    try:
        payload = resp.json()
    except ValueError:
        payload = {}
    return resp.status_code, payload


def _dig(payload, path):
    node = payload
    for key in path:
        try:
            node = node[key]
        except (KeyError, IndexError, TypeError):
            return None
    return node


# --- registry -----------------------------------------------------------------


class BackendRegistry:
    """Owns profiles, the shared cache, and per-profile admission gates.

    ``transport`` mirrors ``requests.post`` at arm's length (url, headers,
    body) -> (status, payload) and exists so tests can run the HTTP path
    without a network.  ``generated_count`` / ``cache_hits`` are cheap
    counters for resume and no-network assertions.
    """

    def __init__(self, profiles, cache_dir: Path | str, transport=None, sleeper=time.sleep):
        self.profiles: dict[str, BackendProfile] = {}
        for profile in profiles:
            if profile.name in self.profiles:
                raise ValueError(f"duplicate profile name {profile.name!r}")
            self.profiles[profile.name] = profile
        self.cache = ResponseCache(cache_dir)
        self._transport = transport or _requests_transport
        self._sleeper = sleeper
        self._gates = {
            name: threading.Semaphore(p.rate.max_inflight) for name, p in self.profiles.items()
        }
        self._stats_lock = threading.Lock()
        self.generated_count = 0
        self.cache_hits = 0

    def profile(self, name: str) -> BackendProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise BackendError(f"unknown backend profile {name!r}") from None

    def complete(self, profile: BackendProfile | str, prompt: MessageList) -> Completion:
        if isinstance(profile, str):
            profile = self.profile(profile)
        report = estimate_budget(prompt, profile)
        if not report.within_budget:
            raise BudgetExceeded(
                f"prompt exceeds profile {profile.name!r} budget: "
                f"{report.image_count} images (limit {report.limit_images}), "
                f"~{report.estimated_input_tokens} tokens (limit {report.limit_tokens})"
            )
        fp = fingerprint(profile, prompt)
        cached = self.cache.read(fp)
        if cached is not None:
            with self._stats_lock:
                self.cache_hits += 1
            return Completion(cached, fp, profile.name, from_cache=True, latency_ms=0)

        started = time.monotonic()
        gate = self._gates[profile.name]
        with gate:
            if profile.kind == "mock_synthetic":
                text = mock_generate(fp, prompt.purpose, prompt)
            elif profile.kind == "mock_replay":
                raise TransportFailure(
                    f"mock_replay profile {profile.name!r} has no cached response for {fp}"
                )
            else:
                text = self._http_generate(profile, prompt)
        latency_ms = int((time.monotonic() - started) * 1000)
        with self._stats_lock:
            self.generated_count += 1
        self.cache.write(fp, profile, text)
        return Completion(text, fp, profile.name, from_cache=False, latency_ms=latency_ms)

    def _http_generate(self, profile: BackendProfile, prompt: MessageList) -> str:
        token = os.environ.get(profile.auth_env_var, "")
        if not token:
            raise AuthMissing(
                f"profile {profile.name!r} needs the {profile.auth_env_var} environment variable"
            )
        body = build_request_body(profile, prompt)
        headers = {
            profile.wire.auth_header: profile.wire.auth_prefix + token,
            "Content-Type": "application/json",
        }
        last_error = "no attempt made"
        for attempt in range(profile.retry.max_attempts):
            if attempt:
                # Exponential backoff with full jitter.
                cap_s = profile.retry.base_backoff_ms * (2 ** (attempt - 1)) / 1000.0
                self._sleeper(random.uniform(0.0, cap_s))
            try:
                status, payload = self._transport(profile.endpoint, headers, body)
            except Exception as exc:  # noqa: BLE001 - transport errors are retryable
                last_error = f"transport error: {exc}"
                continue
            if status == 200:
                text = _dig(payload, profile.wire.response_text_path)
                if not isinstance(text, str) or not text:
                    raise MalformedResponse(
                        f"no text at {list(profile.wire.response_text_path)} in response"
                    )
                return text
            if status in (429,) or status >= 500:
                last_error = f"HTTP {status}"
                continue
            raise TransportFailure(f"HTTP {status} from {profile.endpoint}")
        raise TransportFailure(
            f"{profile.retry.max_attempts} attempts to {profile.endpoint} failed ({last_error})"
        )


def complete(profile: BackendProfile, prompt: MessageList, cache_dir: Path | str,
             transport=None) -> Completion:
    """One-off completion without holding a registry."""
    return BackendRegistry([profile], cache_dir, transport=transport).complete(profile, prompt)
