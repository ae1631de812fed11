"""In-process simulation of the enclave / two-worker aggregation protocol.

Roles (clients, the enclave, worker 1, worker 2) share no state. They only
exchange ``SealedMessage`` objects over a ``Network`` that records the full
transcript. Every link is sealed with AES-GCM under a key from an X25519
handshake. Workers share keys with the enclave only.

Message flow per round::

    phase 1  client_i -> enclave    gradient
    phase 2  enclave  -> worker_j   share set j (g + r for j=1, g - r for j=2)
    phase 3  worker_j -> enclave    partial distance table
    phase 4  enclave  -> client_i   aggregate gradient
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .codebook import NoiseCodebook, build_codebook, round_seed
from .codec import PartialDistanceMatrix, decode_distances, encode_client_gradient, worker_pairwise_distances
from .core import (
    DistanceMatrix,
    GradientVector,
    ResilienceError,
    SystemConfig,
    ValidationError,
    clip_to_norm,
    pairwise_sq_dists,
)
from .leakage import LeakageReport, estimate_variances, mi_bound
from .multikrum import SelectionResult, aggregate_selected, check_resilience_precondition, mean_of, multikrum

PHASE_HANDSHAKE, PHASE_UPLOAD, PHASE_SHARES, PHASE_PARTIALS, PHASE_RESULT = range(5)


class AuthenticationError(Exception):
    """A sealed message failed to open under the key used."""

    def __init__(self, message: str, sender: Optional[str] = None):
        super().__init__(message)
        self.sender = sender


# ---------------------------------------------------------------------------
# roles and keys
# ---------------------------------------------------------------------------

_KIND_ORDER = {"client": 0, "enclave": 1, "worker": 2}


@dataclass(frozen=True)
class RoleId:
    kind: str
    index: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise ValidationError(f"unknown role kind {self.kind!r}")
        if self.kind == "worker" and self.index not in (1, 2):
            raise ValidationError(f"worker ids are limited to 1 and 2, got {self.index}")

    @classmethod
    def client(cls, i: int) -> "RoleId":
        return cls("client", i)

    @classmethod
    def enclave(cls) -> "RoleId":
        return cls("enclave", 0)

    @classmethod
    def worker(cls, j: int) -> "RoleId":
        return cls("worker", j)

    @property
    def sort_key(self) -> tuple:
        return (_KIND_ORDER[self.kind], self.index)

    def __str__(self) -> str:
        return self.kind if self.kind == "enclave" else f"{self.kind}-{self.index}"


ENCLAVE = RoleId.enclave()
WORKER_1 = RoleId.worker(1)
WORKER_2 = RoleId.worker(2)


def link(a: RoleId, b: RoleId) -> Tuple[RoleId, RoleId]:
    """Canonical (lower, higher) ordering of a pairwise link."""
    return (a, b) if a.sort_key <= b.sort_key else (b, a)


@dataclass(frozen=True)
class SealedMessage:
    sender: RoleId
    receiver: RoleId
    phase: int
    kind: str
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def aad(self) -> bytes:
        return _aad(self.sender, self.receiver, self.phase, self.kind)


def _aad(sender: RoleId, receiver: RoleId, phase: int, kind: str) -> bytes:
    return f"{sender}|{receiver}|{phase}|{kind}".encode()


class Channel:
    """One endpoint's view of a pairwise sealed link.

    Nonces are 4 bytes of direction (0: lower->higher endpoint, 1: reverse)
    followed by an 8-byte per-direction counter, so they never repeat under
    one key within a session.
    """

    def __init__(self, me: RoleId, peer: RoleId, key: bytes):
        self.me, self.peer = me, peer
        self._aead = AESGCM(key)
        self._sent = 0

    def _direction(self) -> int:
        return 0 if link(self.me, self.peer)[0] == self.me else 1

    def seal(self, phase: int, kind: str, payload: bytes) -> SealedMessage:
        nonce = struct.pack("<IQ", self._direction(), self._sent)
        self._sent += 1
        ct = self._aead.encrypt(nonce, payload, _aad(self.me, self.peer, phase, kind))
        return SealedMessage(self.me, self.peer, phase, kind, nonce, ct)

    def open(self, msg: SealedMessage) -> bytes:
        if msg.receiver != self.me or msg.sender != self.peer:
            raise AuthenticationError(f"{self.me} cannot open a {msg.sender}->{msg.receiver} message",
                                      sender=str(msg.sender))
        return open_with_key_obj(self._aead, msg)


def open_with_key_obj(aead: AESGCM, msg: SealedMessage) -> bytes:
    try:
        return aead.decrypt(msg.nonce, msg.ciphertext, msg.aad())
    except InvalidTag:
        raise AuthenticationError(f"authentication failed for {msg.sender}->{msg.receiver} {msg.kind}",
                                  sender=str(msg.sender)) from None


def open_with_key(key: bytes, msg: SealedMessage) -> bytes:
    """Attempt to open ``msg`` with an arbitrary key (used by transcript audits)."""
    return open_with_key_obj(AESGCM(key), msg)


@dataclass
class Session:
    keys: Dict[Tuple[RoleId, RoleId], bytes]
    dropped: set

    def key(self, a: RoleId, b: RoleId) -> bytes:
        return self.keys[link(a, b)]

    def channel(self, me: RoleId, peer: RoleId) -> Channel:
        return Channel(me, peer, self.key(me, peer))


def _x25519(rng: np.random.Generator) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(rng.bytes(32))


def _public_bytes(priv: X25519PrivateKey) -> bytes:
    return priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _derive(shared: bytes, a: RoleId, b: RoleId) -> bytes:
    lo, hi = link(a, b)
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=f"maskedkrum-session|{lo}|{hi}".encode()).derive(shared)


def establish_session(
    roles: Iterable[RoleId],
    seed: int = 0,
    responsive: Optional[Callable[[RoleId], bool]] = None,
) -> Session:
    """Pairwise keys for every client-enclave and enclave-worker link.

    Each side contributes an X25519 public value and both derive the link key
    with HKDF over the shared secret. Roles for which ``responsive`` returns
    False never answer the handshake and are marked dropped.
    """
    roles = sorted(set(roles), key=lambda r: r.sort_key)
    if ENCLAVE not in roles:
        raise ValidationError("a session needs an enclave")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E55]))
    privs = {r: _x25519(rng) for r in roles}
    keys: Dict[Tuple[RoleId, RoleId], bytes] = {}
    dropped = set()
    for r in roles:
        if r == ENCLAVE:
            continue
        if responsive is not None and not responsive(r):
            dropped.add(r)
            continue
        enclave_pub = X25519PublicKey.from_public_bytes(_public_bytes(privs[ENCLAVE]))
        peer_pub = X25519PublicKey.from_public_bytes(_public_bytes(privs[r]))
        k_peer = _derive(privs[r].exchange(enclave_pub), r, ENCLAVE)
        k_encl = _derive(privs[ENCLAVE].exchange(peer_pub), ENCLAVE, r)
        assert k_peer == k_encl
        keys[link(r, ENCLAVE)] = k_encl
    return Session(keys, dropped)


# ---------------------------------------------------------------------------
# payload serialization
# ---------------------------------------------------------------------------

def pack_payload(meta: dict, arrays: Mapping[str, np.ndarray] = ()) -> bytes:
    arrays = dict(arrays)
    spec = {name: list(np.shape(a)) for name, a in arrays.items()}
    head = json.dumps({"meta": meta, "arrays": spec}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return struct.pack("<I", len(head)) + head + body


def unpack_payload(blob: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    (hlen,) = struct.unpack_from("<I", blob)
    head = json.loads(blob[4:4 + hlen])
    offset = 4 + hlen
    arrays = {}
    for name, shape in head["arrays"].items():
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return head["meta"], arrays


# ---------------------------------------------------------------------------
# sealed codebook storage ("external memory")
# ---------------------------------------------------------------------------

class SealedCodebookStore:
    """Codebook rows sealed in batches under the enclave's storage key.

    Models the enclave keeping its noise outside protected memory: only the
    batches covering requested rows are decrypted.
    """

    def __init__(self, codebook: NoiseCodebook, storage_key: bytes, batch_rows: int = 64):
        self.n, self.dim, self.constant, self.seed = codebook.n, codebook.dim, codebook.constant, codebook.seed
        self.batch_rows = batch_rows
        self._aead = AESGCM(storage_key)
        self._batches: List[Tuple[bytes, bytes]] = []
        header = codebook.to_bytes()[:32]
        self._header = header
        for b, start in enumerate(range(0, codebook.n, batch_rows)):
            rows = codebook.vectors[start:start + batch_rows]
            nonce = struct.pack("<IQ", 0x0C0DE, b)
            self._batches.append((nonce, self._aead.encrypt(nonce, rows.astype("<f8").tobytes(), header + struct.pack("<Q", b))))
        self.batches_opened = 0

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        out = np.empty((len(indices), self.dim))
        cache: Dict[int, np.ndarray] = {}
        for k, idx in enumerate(indices):
            if not 0 <= idx < self.n:
                raise IndexError(f"codebook has {self.n} rows, asked for row {idx}")
            b = idx // self.batch_rows
            if b not in cache:
                nonce, ct = self._batches[b]
                try:
                    plain = self._aead.decrypt(nonce, ct, self._header + struct.pack("<Q", b))
                except InvalidTag:
                    raise AuthenticationError(f"sealed codebook batch {b} failed authentication") from None
                cache[b] = np.frombuffer(plain, dtype="<f8").reshape(-1, self.dim)
                self.batches_opened += 1
            out[k] = cache[b][idx - b * self.batch_rows]
        return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Typed message bus with a full transcript.

    In deterministic mode an inbox is drained in (phase, sender) order no
    matter the order messages were posted in.
    """

    def __init__(self, deterministic: bool = True,
                 tamper: Optional[Callable[[SealedMessage], SealedMessage]] = None):
        self.deterministic = deterministic
        self.tamper = tamper
        self.transcript: List[SealedMessage] = []
        self._inbox: Dict[RoleId, List[SealedMessage]] = {}

    def post(self, msg: SealedMessage) -> None:
        if self.tamper is not None:
            msg = self.tamper(msg)
        self.transcript.append(msg)
        self._inbox.setdefault(msg.receiver, []).append(msg)

    def drain(self, role: RoleId) -> List[SealedMessage]:
        msgs = self._inbox.pop(role, [])
        if self.deterministic:
            msgs.sort(key=lambda m: (m.phase, m.sender.sort_key))
        return msgs


# ---------------------------------------------------------------------------
# roles
# ---------------------------------------------------------------------------

GradientSource = Callable[[int, int], np.ndarray]


class Client:
    def __init__(self, client_id: int, channel: Channel):
        self.id = client_id
        self.role = RoleId.client(client_id)
        self.channel = channel
        self.last_aggregate: Optional[np.ndarray] = None

    def upload(self, round_index: int, values: np.ndarray) -> SealedMessage:
        payload = pack_payload({"round": round_index, "client": self.id}, {"gradient": values})
        return self.channel.seal(PHASE_UPLOAD, "gradient", payload)

    def receive(self, msg: SealedMessage) -> None:
        _, arrays = unpack_payload(self.channel.open(msg))
        self.last_aggregate = arrays["aggregate"]


class Worker:
    """Untrusted accelerator. Its only input is the share set addressed to it."""

    ACCEPTS = frozenset({"shares"})

    def __init__(self, worker_id: int, channel: Channel, threads: Optional[int] = None):
        self.id = worker_id
        self.role = RoleId.worker(worker_id)
        self.channel = channel
        self.threads = threads
        self.received_kinds: List[str] = []

    def handle(self, msg: SealedMessage) -> SealedMessage:
        if msg.kind not in self.ACCEPTS:
            raise ValidationError(f"worker {self.id} does not accept {msg.kind!r} messages")
        self.received_kinds.append(msg.kind)
        meta, arrays = unpack_payload(self.channel.open(msg))
        part = worker_pairwise_distances(list(arrays["shares"]), self.id, ids=meta["ids"], threads=self.threads)
        reply = pack_payload({"round": meta["round"], "ids": list(part.matrix.ids), "worker": self.id},
                             {"distances": part.matrix.entries})
        return self.channel.seal(PHASE_PARTIALS, "partial", reply)


@dataclass
class RoundOutcome:
    round_index: int
    status: str  # "ok" | "failed-precondition" | "aborted"
    participating_ids: tuple
    selection: Optional[SelectionResult] = None
    aggregate: Optional[GradientVector] = None
    timings: Dict[str, int] = field(default_factory=dict)  # microseconds per phase
    leakage: Optional[LeakageReport] = None
    culprit: Optional[str] = None
    reason: Optional[str] = None
    dropped_ids: tuple = ()

    def audit_record(self) -> dict:
        """Deterministic JSON-able record (timings excluded)."""
        rec = {
            "round": self.round_index,
            "status": self.status,
            "participating_ids": list(self.participating_ids),
            "dropped_ids": list(self.dropped_ids),
        }
        if self.selection is not None:
            rec["selection"] = self.selection.as_dict()
        if self.aggregate is not None:
            rec["aggregate"] = [float(x) for x in self.aggregate.values]
        if self.leakage is not None:
            rec["leakage_bound_nats"] = self.leakage.per_client_bound
            rec["leakage_sigma"] = self.leakage.sigma
        if self.culprit is not None:
            rec["culprit"] = self.culprit
        if self.reason is not None:
            rec["reason"] = self.reason
        return rec


def handle_dropout(participants: Sequence[int], dropped: Iterable[int], f: int) -> tuple:
    """Remove dropped clients; their codebook rows simply go unused."""
    gone = set(dropped)
    remaining = tuple(i for i in participants if i not in gone)
    if not check_resilience_precondition(max(len(remaining), 1), f):
        raise ResilienceError(f"N >= 2f+3 violated after drop-outs: {len(remaining)} participants, f={f}")
    return remaining


class Enclave:
    def __init__(self, config: SystemConfig, channels: Dict[RoleId, Channel], storage_key: bytes,
                 aggregator: str = "multikrum"):
        if aggregator not in ("multikrum", "plain_mean"):
            raise ValidationError(f"unknown aggregator {aggregator!r}")
        self.config = config
        self.channels = channels
        self.storage_key = storage_key
        self.aggregator = aggregator
        self.store: Optional[SealedCodebookStore] = None

    def install_codebook(self, codebook: NoiseCodebook) -> None:
        self.store = SealedCodebookStore(codebook, self.storage_key, self.config.codebook_batch_rows)

    def open_uploads(self, msgs: Sequence[SealedMessage], round_index: int) -> Dict[int, GradientVector]:
        grads = {}
        for msg in msgs:
            if msg.sender.kind != "client" or msg.kind != "gradient":
                raise ValidationError(f"unexpected {msg.kind} from {msg.sender} during upload")
            meta, arrays = unpack_payload(self.channels[msg.sender].open(msg))
            if meta["round"] != round_index or meta["client"] != msg.sender.index:
                raise ValidationError(f"stale or misattributed upload from {msg.sender}")
            g = GradientVector(msg.sender.index, arrays["gradient"])
            if g.dim != self.config.dim:
                raise ValidationError(f"client {g.client_id} sent dim {g.dim}, expected {self.config.dim}")
            if self.config.clip_norm is not None:
                g = clip_to_norm(g, self.config.clip_norm)
            grads[g.client_id] = g
        return grads

    def dispatch_shares(self, grads: Mapping[int, GradientVector], round_index: int) -> List[SealedMessage]:
        ids = sorted(grads)
        masks = self.store.rows([i - 1 for i in ids])
        pairs = [encode_client_gradient(grads[i], masks[k]) for k, i in enumerate(ids)]
        meta = {"round": round_index, "ids": ids}
        plus = pack_payload(meta, {"shares": np.stack([p.share_plus for p in pairs])})
        minus = pack_payload(meta, {"shares": np.stack([p.share_minus for p in pairs])})
        return [self.channels[WORKER_1].seal(PHASE_SHARES, "shares", plus),
                self.channels[WORKER_2].seal(PHASE_SHARES, "shares", minus)]

    def decode_and_select(self, msgs: Sequence[SealedMessage], ids: Sequence[int]) -> SelectionResult:
        parts = {}
        for msg in msgs:
            if msg.sender.kind != "worker" or msg.kind != "partial":
                raise ValidationError(f"unexpected {msg.kind} from {msg.sender} during decode")
            meta, arrays = unpack_payload(self.channels[msg.sender].open(msg))
            if list(meta["ids"]) != list(ids):
                raise ValidationError(f"{msg.sender} returned distances for the wrong client set")
            parts[msg.sender.index] = PartialDistanceMatrix(msg.sender.index, DistanceMatrix(tuple(ids), arrays["distances"]))
        decoded = decode_distances(parts[1], parts[2], self.store.constant)
        return multikrum(decoded, self.config.n_byzantine, self._k(len(ids)))

    def _k(self, n_participants: int) -> int:
        return min(self.config.select_k, n_participants - self.config.n_byzantine)

    def broadcast(self, aggregate: GradientVector, ids: Sequence[int], round_index: int) -> List[SealedMessage]:
        payload = pack_payload({"round": round_index}, {"aggregate": aggregate.values})
        return [self.channels[RoleId.client(i)].seal(PHASE_RESULT, "aggregate", payload) for i in ids]


class ProtocolSimulation:
    """All four role types wired together for a sequence of rounds."""

    def __init__(self, config: SystemConfig, gradient_source: GradientSource,
                 codebook: Optional[NoiseCodebook] = None, aggregator: str = "multikrum",
                 deterministic: bool = True, threads: Optional[int] = None,
                 unresponsive: Iterable[int] = (),
                 tamper: Optional[Callable[[SealedMessage], SealedMessage]] = None):
        self.config = config
        self.gradient_source = gradient_source
        self.network = Network(deterministic=deterministic, tamper=tamper)
        self.threads = threads
        self._fixed_codebook = codebook
        self._codebook_cache: Optional[NoiseCodebook] = None
        silent = {RoleId.client(i) for i in unresponsive}
        self.registered = list(range(1, config.n_clients + 1))
        roles = [RoleId.client(i) for i in self.registered] + [ENCLAVE, WORKER_1, WORKER_2]
        self.session = establish_session(roles, seed=config.seed, responsive=lambda r: r not in silent)
        self.clients = {i: Client(i, self.session.channel(RoleId.client(i), ENCLAVE))
                        for i in self.registered if RoleId.client(i) not in self.session.dropped}
        self.workers = {j: Worker(j, self.session.channel(RoleId.worker(j), ENCLAVE), threads) for j in (1, 2)}
        enclave_channels = {peer: self.session.channel(ENCLAVE, peer)
                            for peer in [RoleId.client(i) for i in self.clients] + [WORKER_1, WORKER_2]}
        storage_key = hashlib.sha256(b"enclave-storage|" + config.seed.to_bytes(8, "little")).digest()
        self.enclave = Enclave(config, enclave_channels, storage_key, aggregator)
        self.pending_drops: set = set()
        self.outcomes: List[RoundOutcome] = []

    # codebook lifecycle: fresh per round unless reused or supplied
    def _codebook_for(self, round_index: int) -> NoiseCodebook:
        cfg = self.config
        n_rows = max(self.registered)
        if self._fixed_codebook is not None and self._fixed_codebook.n >= n_rows:
            return self._fixed_codebook
        if cfg.reuse_codebook and self._codebook_cache is not None and self._codebook_cache.n >= n_rows:
            return self._codebook_cache
        seed = round_seed(cfg.seed, 0 if cfg.reuse_codebook else round_index)
        if n_rows > cfg.dim:
            raise ValidationError(f"{n_rows} codebook rows need dim >= {n_rows}")
        self._codebook_cache = build_codebook(n_rows, cfg.dim, cfg.codebook_constant, seed)
        return self._codebook_cache

    def add_client(self) -> int:
        """Register a new client; it joins from the next round on.

        When all codebook rows are taken the next round builds a larger one.
        """
        new_id = max(self.registered) + 1
        self.registered.append(new_id)
        role = RoleId.client(new_id)
        extra = establish_session([role, ENCLAVE], seed=self.config.seed + new_id)
        self.session.keys[link(role, ENCLAVE)] = extra.key(role, ENCLAVE)
        self.clients[new_id] = Client(new_id, self.session.channel(role, ENCLAVE))
        self.enclave.channels[role] = self.session.channel(ENCLAVE, role)
        return new_id

    def run_round(self, round_index: int, drop_before_upload: Iterable[int] = (),
                  drop_after_encoding: Iterable[int] = ()) -> RoundOutcome:
        cfg = self.config
        net = self.network
        timings: Dict[str, int] = {}
        clock = time.perf_counter_ns

        before = set(drop_before_upload) | self.pending_drops
        self.pending_drops = set(drop_after_encoding)
        active = sorted(self.clients)
        dropped = tuple(sorted(i for i in self.registered if i not in self.clients or i in before))
        try:
            participants = handle_dropout(active, before, cfg.n_byzantine)
        except ResilienceError as exc:
            out = RoundOutcome(round_index, "failed-precondition",
                               tuple(i for i in active if i not in before), reason=str(exc), dropped_ids=dropped)
            self.outcomes.append(out)
            return out

        t0 = clock()
        for i in participants:
            values = np.asarray(self.gradient_source(i, round_index), dtype=np.float64)
            net.post(self.clients[i].upload(round_index, values))
        try:
            grads = self.enclave.open_uploads(net.drain(ENCLAVE), round_index)
        except AuthenticationError as exc:
            return self._abort(round_index, participants, exc, dropped)
        timings["upload"] = (clock() - t0) // 1000

        if self.enclave.aggregator == "plain_mean":
            t0 = clock()
            agg = mean_of(grads, participants)
            timings["aggregate"] = (clock() - t0) // 1000
            return self._finish(round_index, participants, None, agg, grads, timings, dropped)

        t0 = clock()
        self.enclave.install_codebook(self._codebook_for(round_index))
        for msg in self.enclave.dispatch_shares(grads, round_index):
            net.post(msg)
        timings["encode"] = (clock() - t0) // 1000

        t0 = clock()
        try:
            with ThreadPoolExecutor(max_workers=2) as pool:
                futures = [pool.submit(self._run_worker, j) for j in (1, 2)]
                replies = [r for fut in futures for r in fut.result()]
        except AuthenticationError as exc:
            return self._abort(round_index, participants, exc, dropped)
        for reply in replies:
            net.post(reply)
        timings["distances"] = (clock() - t0) // 1000

        t0 = clock()
        try:
            sel = self.enclave.decode_and_select(net.drain(ENCLAVE), participants)
        except AuthenticationError as exc:
            return self._abort(round_index, participants, exc, dropped)
        agg = aggregate_selected(grads, sel)
        timings["select"] = (clock() - t0) // 1000
        return self._finish(round_index, participants, sel, agg, grads, timings, dropped)

    def _run_worker(self, j: int) -> List[SealedMessage]:
        worker = self.workers[j]
        return [worker.handle(msg) for msg in self.network.drain(worker.role)]

    def _finish(self, round_index, participants, sel, agg, grads, timings, dropped) -> RoundOutcome:
        t0 = time.perf_counter_ns()
        for msg in self.enclave.broadcast(agg, participants, round_index):
            self.network.post(msg)
        for i in participants:
            for msg in self.network.drain(RoleId.client(i)):
                self.clients[i].receive(msg)
        timings["broadcast"] = (time.perf_counter_ns() - t0) // 1000
        variances = estimate_variances([grads[i] for i in participants])
        leak = mi_bound(variances, self.config.sigma, variance_source="estimated")
        out = RoundOutcome(round_index, "ok", tuple(participants), sel, agg, timings, leak, dropped_ids=dropped)
        self.outcomes.append(out)
        return out

    def _abort(self, round_index, participants, exc, dropped) -> RoundOutcome:
        out = RoundOutcome(round_index, "aborted", tuple(participants), culprit=exc.sender,
                           reason=str(exc), dropped_ids=dropped)
        self.outcomes.append(out)
        return out


def run_round(config: SystemConfig, gradient_source: GradientSource,
              codebook: Optional[NoiseCodebook] = None, round_index: int = 0, **kwargs) -> RoundOutcome:
    """One-shot round on a fresh session."""
    sim = ProtocolSimulation(config, gradient_source, codebook, **kwargs)
    return sim.run_round(round_index)


def plaintext_pipeline(gradients: Mapping[int, np.ndarray], f: int, k: int,
                       clip_norm: Optional[float] = None) -> Tuple[SelectionResult, GradientVector]:
    """Reference path: no sealing, no shares, distances on raw gradients."""
    ids = sorted(gradients)
    grads = {i: GradientVector(i, gradients[i]) for i in ids}
    if clip_norm is not None:
        grads = {i: clip_to_norm(g, clip_norm) for i, g in grads.items()}
    dm = DistanceMatrix(tuple(ids), pairwise_sq_dists([grads[i].values for i in ids]))
    sel = multikrum(dm, f, min(k, len(ids) - f))
    return sel, aggregate_selected(grads, sel)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    n_clients: int
    n_byzantine: int
    dim: int
    codebook_constant: float
    seed: int
    rounds: int = 1
    select_k: Optional[int] = None
    attack: dict = field(default_factory=lambda: {"kind": "none", "scale": 1.0})
    dropouts: list = field(default_factory=list)
    clip_norm: Optional[float] = None
    reuse_codebook: bool = False
    learning_rate: float = 0.05
    samples_per_client: int = 64

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        missing = {"n_clients", "n_byzantine", "dim", "codebook_constant", "seed"} - set(raw)
        if missing:
            raise ValidationError(f"scenario is missing keys: {sorted(missing)}")
        sc = cls(**raw)
        if sc.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        for d in sc.dropouts:
            if not {"round", "client"} <= set(d) or set(d) - {"round", "client", "phase"}:
                raise ValidationError(f"bad dropout entry {d}")
            if d.get("phase", "upload") not in ("upload", "post_encoding"):
                raise ValidationError(f"unknown dropout phase in {d}")
        return sc

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def system_config(self) -> SystemConfig:
        return SystemConfig(
            n_clients=self.n_clients, n_byzantine=self.n_byzantine, dim=self.dim,
            codebook_constant=self.codebook_constant, select_k=self.select_k, seed=self.seed,
            clip_norm=self.clip_norm, reuse_codebook=self.reuse_codebook,
        )

    def drops_for(self, round_index: int) -> Tuple[List[int], List[int]]:
        upload = [d["client"] for d in self.dropouts
                  if d["round"] == round_index and d.get("phase", "upload") == "upload"]
        late = [d["client"] for d in self.dropouts
                if d["round"] == round_index and d.get("phase") == "post_encoding"]
        return upload, late

    def as_dict(self) -> dict:
        return asdict(self)
