"""Backends for the frozen model: HTTP chat endpoint, scripted table, record/replay cache."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence, Union

import httpx

from .core import SqiError

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "SQI_API_KEY"
CACHE_KEY_VERSION = "sqi-cache/v1"


class BackendErrorKind(enum.Enum):
    TRANSPORT = "transport"
    AUTH = "auth"
    RATE_LIMIT_EXHAUSTED = "rate-limit-exhausted"
    MALFORMED_RESPONSE = "malformed-response"


class BackendError(SqiError):
    def __init__(self, kind: BackendErrorKind, message: str, item_id: str | None = None):
        self.kind = kind
        self.message = message
        self.item_id = item_id
        super().__init__(message)

    def __str__(self) -> str:
        prefix = f"item {self.item_id}: " if self.item_id else ""
        return f"{prefix}{self.kind.value}: {self.message}"


class CacheMissError(BackendError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(BackendErrorKind.TRANSPORT, f"no cache entry for key {key}")


class CacheCorruptError(SqiError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    image_b64: str | None = None
    media_type: str | None = None
    temperature: float = 0.0
    seed: int | None = None
    model_name: str = ""

    def canonical_dict(self) -> dict:
        image = None
        if self.image_b64 is not None:
            image = {"data": self.image_b64, "media_type": self.media_type}
        return {
            "image": image,
            "model": self.model_name,
            "seed": self.seed,
            "system": self.system_text,
            # repr is the shortest round-tripping form, identical on every platform
            "temperature": repr(float(self.temperature)),
            "user": self.user_text,
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(
            self.canonical_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode("utf-8")

    def payload(self) -> dict:
        """Chat-completions request body."""
        content: list[dict] = [{"type": "text", "text": self.user_text}]
        if self.image_b64 is not None:
            url = f"data:{self.media_type};base64,{self.image_b64}"
            content.append({"type": "image_url", "image_url": {"url": url}})
        body: dict = {
            "model": self.model_name,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": content},
            ],
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


def _key_from_canonical(canonical: bytes, backend_kind: str, model_name: str) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([CACHE_KEY_VERSION, backend_kind, model_name]).encode("utf-8"))
    h.update(b"\n")
    h.update(canonical)
    return h.hexdigest()


def cache_key(request: ChatRequest, backend_kind: str, model_name: str) -> str:
    return _key_from_canonical(request.canonical_bytes(), backend_kind, model_name)


@dataclass(frozen=True)
class Reply:
    text: str
    cache_hit: bool = False
    usage: dict | None = None


class Backend:
    """Common surface for every backend kind."""

    kind = "abstract"

    def __init__(self, model_name: str):
        self.model_name = model_name
        self._count_lock = threading.Lock()
        self.request_count = 0

    def _count(self) -> None:
        with self._count_lock:
            self.request_count += 1

    def send(self, request: ChatRequest) -> Reply:
        raise NotImplementedError

    def complete(self, request: ChatRequest) -> str:
        return self.send(request).text

    def close(self) -> None:
        pass


BackendHandle = Backend


def complete(handle: Backend, request: ChatRequest) -> str:
    return handle.complete(request)


# --- HTTP -------------------------------------------------------------------


class HttpBackend(Backend):
    kind = "http"

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 60.0,
        max_transport_retries: int = 3,
        backoff_base: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint:
            raise ValueError("http backend needs an endpoint")
        if not model_name:
            raise ValueError("http backend needs a model name")
        super().__init__(model_name)
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_transport_retries = max_transport_retries
        self.backoff_base = backoff_base
        self.transport_attempts = 0
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "").strip()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def send(self, request: ChatRequest) -> Reply:
        self._count()
        url = f"{self.endpoint}/chat/completions"
        body = request.payload()
        last: BackendError | None = None
        for attempt in range(self.max_transport_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            with self._count_lock:
                self.transport_attempts += 1
            try:
                resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = BackendError(BackendErrorKind.TRANSPORT, f"{type(exc).__name__}: {exc}")
                log.info("attempt %d to %s failed: %s", attempt + 1, url, exc)
                continue
            status = resp.status_code
            if 200 <= status < 300:
                return _parse_completion(resp)
            if status in (401, 403):
                raise BackendError(BackendErrorKind.AUTH, f"HTTP {status} from {url}")
            if status == 429:
                last = BackendError(
                    BackendErrorKind.RATE_LIMIT_EXHAUSTED,
                    f"HTTP 429 after {attempt + 1} attempts",
                )
            elif status >= 500:
                last = BackendError(BackendErrorKind.TRANSPORT, f"HTTP {status} from {url}")
            else:
                raise BackendError(
                    BackendErrorKind.TRANSPORT, f"HTTP {status} from {url}: {resp.text[:200]}"
                )
            log.info("attempt %d to %s got HTTP %d", attempt + 1, url, status)
        assert last is not None
        raise last

    def close(self) -> None:
        self._client.close()


def _parse_completion(resp: httpx.Response) -> Reply:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(
            BackendErrorKind.MALFORMED_RESPONSE, f"unexpected response body ({exc!r})"
        ) from None
    if isinstance(content, list):
        content = "".join(
            part.get("text", "") for part in content if isinstance(part, dict)
        )
    if not isinstance(content, str):
        raise BackendError(BackendErrorKind.MALFORMED_RESPONSE, "message content is not text")
    usage = data.get("usage") if isinstance(data.get("usage"), dict) else None
    return Reply(content, usage=usage)


# --- scripted ---------------------------------------------------------------

ScriptValue = Union[str, Sequence[str]]


class ScriptedBackend(Backend):
    """Deterministic stand-in for a model, driven by a response table.

    Lookup order: exact ``user_text`` key, then ``"~<substring>"`` keys in
    table order, then the ``"*"`` wildcard. A list value is consumed one
    reply per call, repeating its last element. ``responder`` replaces the
    table with an arbitrary function of the request.
    """

    kind = "scripted"

    def __init__(
        self,
        table: Mapping[str, ScriptValue] | None = None,
        model_name: str = "scripted",
        responder: Callable[[ChatRequest], str] | None = None,
    ):
        if table is None and responder is None:
            raise ValueError("scripted backend needs a response table or a responder")
        super().__init__(model_name)
        self.table = dict(table or {})
        self.responder = responder
        self.requests: list[ChatRequest] = []
        self._positions: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_json(cls, path: str | Path, model_name: str = "scripted") -> "ScriptedBackend":
        table = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(table, dict):
            raise ValueError(f"{path}: scripted table must be a JSON object")
        return cls(table, model_name=model_name)

    def _lookup(self, user_text: str) -> str | None:
        if user_text in self.table:
            return user_text
        for key in self.table:
            if key.startswith("~") and key[1:] in user_text:
                return key
        return "*" if "*" in self.table else None

    def send(self, request: ChatRequest) -> Reply:
        self._count()
        with self._lock:
            self.requests.append(request)
            if self.responder is not None:
                return Reply(self.responder(request))
            key = self._lookup(request.user_text)
            if key is None:
                raise BackendError(BackendErrorKind.TRANSPORT, "scripted table has no matching entry")
            value = self.table[key]
            if isinstance(value, str):
                return Reply(value)
            pos = self._positions.get(key, 0)
            self._positions[key] = pos + 1
            return Reply(value[min(pos, len(value) - 1)])


# --- content-addressed cache ------------------------------------------------

_KEY_RE = re.compile(r"[0-9a-f]{64}")


@dataclass(frozen=True)
class CacheEntry:
    key: str
    backend_kind: str
    model_name: str
    request_canonical: str
    response_text: str
    timestamp: str
    usage: dict | None = None

    def fields(self) -> dict:
        return {
            "backend_kind": self.backend_kind,
            "key": self.key,
            "model_name": self.model_name,
            "request_canonical": self.request_canonical,
            "response_text": self.response_text,
            "timestamp": self.timestamp,
            "usage": self.usage,
        }

    def checksum(self) -> str:
        blob = json.dumps(self.fields(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_bytes(self) -> bytes:
        doc = dict(self.fields(), checksum=self.checksum())
        return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CacheEntry":
        doc = json.loads(data.decode("utf-8"))
        entry = cls(
            key=doc["key"],
            backend_kind=doc["backend_kind"],
            model_name=doc["model_name"],
            request_canonical=doc["request_canonical"],
            response_text=doc["response_text"],
            timestamp=doc["timestamp"],
            usage=doc.get("usage"),
        )
        if doc.get("checksum") != entry.checksum():
            raise CacheCorruptError("checksum mismatch")
        return entry

    def expected_key(self) -> str:
        return _key_from_canonical(
            self.request_canonical.encode("utf-8"), self.backend_kind, self.model_name
        )


class CacheStore:
    """One JSON file per entry under ``entries/`` plus an append-only journal.

    Entries are published with a hard link from a temp file, so the first
    writer of a key wins and nobody ever observes a partial file.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.entries_dir = self.root / "entries"
        self.journal_path = self.root / "journal.jsonl"
        self._journal_lock = threading.Lock()

    def ensure(self) -> None:
        self.entries_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: str) -> Path:
        return self.entries_dir / f"{key}.json"

    def get(self, key: str) -> CacheEntry | None:
        try:
            data = self.path_for(key).read_bytes()
        except FileNotFoundError:
            return None
        return CacheEntry.from_bytes(data)

    def put(self, entry: CacheEntry) -> CacheEntry:
        """Write ``entry`` unless one exists; return whichever entry is durable."""
        self.ensure()
        final = self.path_for(entry.key)
        fd, tmp = tempfile.mkstemp(prefix=f".{entry.key[:16]}.", suffix=".tmp", dir=self.entries_dir)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(entry.to_bytes())
                fh.flush()
                os.fsync(fh.fileno())
            try:
                os.link(tmp, final)
            except FileExistsError:
                pass
            except OSError:
                # no hard links on this filesystem; rename is still atomic
                if not final.exists():
                    os.replace(tmp, final)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        durable = self.get(entry.key)
        assert durable is not None
        return durable

    def journal(self, event: str, key: str) -> None:
        line = json.dumps({"event": event, "key": key}, sort_keys=True)
        with self._journal_lock:
            self.root.mkdir(parents=True, exist_ok=True)
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def journal_records(self) -> list[dict]:
        if not self.journal_path.exists():
            return []
        with open(self.journal_path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def keys(self) -> list[str]:
        if not self.entries_dir.exists():
            return []
        return sorted(p.stem for p in self.entries_dir.glob("*.json") if _KEY_RE.fullmatch(p.stem))

    def iter_entry_files(self) -> Iterator[Path]:
        if self.entries_dir.exists():
            yield from sorted(self.entries_dir.glob("*.json"))

    def verify(self) -> list[tuple[str, str]]:
        """(key, problem) for every entry that fails its integrity checks."""
        bad = []
        for path in self.iter_entry_files():
            key = path.stem
            data = path.read_bytes()
            try:
                entry = CacheEntry.from_bytes(data)
            except (CacheCorruptError, UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
                bad.append((key, f"unreadable entry ({exc})"))
                continue
            if entry.to_bytes() != data:
                bad.append((key, "entry bytes are not canonical"))
            elif entry.key != key:
                bad.append((key, f"file name does not match stored key {entry.key}"))
            elif entry.expected_key() != key:
                bad.append((key, "request digest does not match key"))
        return bad

    def gc(self) -> list[str]:
        """Delete entries the journal never mentions, plus stray temp files."""
        referenced = {rec.get("key") for rec in self.journal_records()}
        removed = []
        if not self.entries_dir.exists():
            return removed
        for path in sorted(self.entries_dir.iterdir()):
            if path.suffix == ".tmp" or (path.suffix == ".json" and path.stem not in referenced):
                path.unlink()
                removed.append(path.name)
        return removed


class RecordingBackend(Backend):
    """Read-through cache in front of a live backend; every call is journaled."""

    def __init__(self, upstream: Backend, store: CacheStore):
        super().__init__(upstream.model_name)
        self.upstream = upstream
        self.store = store
        self.kind = upstream.kind
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def send(self, request: ChatRequest) -> Reply:
        self._count()
        key = cache_key(request, self.upstream.kind, self.upstream.model_name)
        with self._lock_for(key):
            entry = self.store.get(key)
            if entry is not None:
                self.store.journal("hit", key)
                return Reply(entry.response_text, cache_hit=True, usage=entry.usage)
            reply = self.upstream.send(request)
            entry = CacheEntry(
                key=key,
                backend_kind=self.upstream.kind,
                model_name=self.upstream.model_name,
                request_canonical=request.canonical_bytes().decode("utf-8"),
                response_text=reply.text,
                timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                usage=reply.usage,
            )
            durable = self.store.put(entry)
            self.store.journal("store", key)
            return Reply(durable.response_text, cache_hit=False, usage=durable.usage)

    def close(self) -> None:
        self.upstream.close()


class ReplayBackend(Backend):
    """Serves recorded responses only; a missing entry is an error, never a network call."""

    kind = "replay"

    def __init__(self, store: CacheStore, source_kind: str, model_name: str):
        super().__init__(model_name)
        self.store = store
        self.source_kind = source_kind

    def send(self, request: ChatRequest) -> Reply:
        self._count()
        key = cache_key(request, self.source_kind, self.model_name)
        entry = self.store.get(key)
        if entry is None:
            raise CacheMissError(key)
        return Reply(entry.response_text, cache_hit=True, usage=entry.usage)


def record(handle: Backend, request: ChatRequest, store: CacheStore | None = None) -> str:
    """Complete ``request`` through the cache, writing an entry on a miss."""
    if not isinstance(handle, RecordingBackend):
        if store is None:
            raise ValueError("record needs a RecordingBackend or a cache store")
        handle = RecordingBackend(handle, store)
    return handle.complete(request)
