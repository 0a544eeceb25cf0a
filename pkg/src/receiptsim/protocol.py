"""Messenger protocol data model: accounts, device directories, probe
messages and the receipt/stealthiness rules that govern them.

Everything in this module is pure data plus pure functions; nothing here
touches the event loop or an RNG, so values can be shared freely across
scenarios and threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence

# Fixed per-message wire overhead (framing, ids, key material) added on top
# of the payload when accounting received bytes at the victim.
ENVELOPE_OVERHEAD_BYTES = 500


class ProbeKind(str, Enum):
    TEXT_MESSAGE = "text_message"
    REACTION = "reaction"
    SELF_REACTION = "self_reaction"
    REMOVE_REACTION = "remove_reaction"
    EDIT = "edit"
    DELETE = "delete"
    INVALID_REF_REACTION = "invalid_ref_reaction"


#: Kinds that refer to a previously sent message.
REF_KINDS = frozenset(
    {
        ProbeKind.REACTION,
        ProbeKind.SELF_REACTION,
        ProbeKind.REMOVE_REACTION,
        ProbeKind.EDIT,
        ProbeKind.DELETE,
        ProbeKind.INVALID_REF_REACTION,
    }
)

#: Kinds handled by the client's reaction code path (size handling limit).
REACTION_KINDS = frozenset(
    {
        ProbeKind.REACTION,
        ProbeKind.SELF_REACTION,
        ProbeKind.REMOVE_REACTION,
        ProbeKind.INVALID_REF_REACTION,
    }
)


class ReceiptDecision(str, Enum):
    """Outcome of submitting a probe to the service."""

    ACKED = "acked"
    ACKED_BUT_DISCARDED = "acked_but_discarded"
    SILENTLY_DROPPED = "silently_dropped"
    REJECTED_BY_SERVER = "rejected_by_server"


class ReceiptKind(str, Enum):
    SERVER_ACK = "server_ack"
    DEVICE_ACK = "device_ack"
    READ_ACK = "read_ack"


class ProtocolError(Exception):
    """Base class for protocol-level input errors."""


class UnsupportedProbeKind(ProtocolError):
    """The probe kind cannot be expressed on the given messenger."""


class UnregisteredAccountError(ProtocolError):
    """The target account has no registered devices."""


class DirectoryIntegrityError(ProtocolError):
    """Device index reuse or non-monotonic registration."""


@dataclass(frozen=True)
class AccountId:
    """Opaque account handle; stands in for a phone number."""

    value: str

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class StealthContext:
    """Situation a probe is sent in, as far as notification rules care."""

    existing_conversation: bool = False
    reacts_to_own_message: bool = False
    target_platform: str = "android"


@dataclass(frozen=True)
class MessengerPolicy:
    """Receipt and validation behaviour of one messenger family.

    ``receipt_actions`` lists the kinds that elicit a device ack;
    ``probe_vocabulary`` lists the kinds a client of this messenger can
    express at all (e.g. self-reactions do not exist on the restrictive
    policy).  Announced edit/delete windows are what the UI tells users;
    enforced windows are what the receiving client actually honours, and
    are never shorter than the announced ones.
    """

    name: str
    receipt_actions: frozenset[ProbeKind]
    probe_vocabulary: frozenset[ProbeKind]
    per_device_receipts: bool
    main_device_index: int
    self_reaction_allowed: bool
    invalid_ref_acked: bool
    edit_window_announced_s: float
    edit_window_enforced_s: float
    delete_window_announced_s: float
    delete_window_enforced_s: float
    payload_limits: Mapping[ProbeKind, int]
    max_edits: Optional[int] = None
    reaction_handling_limit_bytes: Optional[int] = None
    # When the client discards an oversized reaction, does it still ack it?
    ack_oversized_reactions: bool = False
    # Whether the reaction handling limit also applies to reactions whose
    # referenced message does not exist (unobservable either way upstream;
    # kept as a switch).
    handling_limit_applies_to_invalid_refs: bool = True
    # Platforms on which an edit raises a (silent) notification.
    edit_notifies_platforms: frozenset[str] = frozenset()
    read_receipts_enabled: bool = False
    # Mitigation switches (off for the unmodified protocol).
    strict_validation: bool = False
    restrict_to_contacts: bool = False

    def __post_init__(self) -> None:
        if self.edit_window_enforced_s < self.edit_window_announced_s:
            raise ValueError("enforced edit window shorter than announced")
        if self.delete_window_enforced_s < self.delete_window_announced_s:
            raise ValueError("enforced delete window shorter than announced")
        if not self.receipt_actions <= self.probe_vocabulary:
            raise ValueError("receipt_actions must be expressible probe kinds")

    def payload_limit(self, kind: ProbeKind) -> int:
        return int(self.payload_limits.get(kind, 0))

    def notifies_target(self, kind: ProbeKind, context: StealthContext) -> bool:
        """Push-notification rule for a probe of ``kind`` in ``context``."""
        if kind not in self.probe_vocabulary:
            raise UnsupportedProbeKind(f"{kind.value} is not supported on {self.name}")
        if kind == ProbeKind.TEXT_MESSAGE:
            return True
        if kind == ProbeKind.REACTION:
            # Reacting to the target's own message pushes; reacting to a
            # message the attacker sent does not.
            return not context.reacts_to_own_message
        if kind == ProbeKind.EDIT:
            return context.target_platform.lower() in self.edit_notifies_platforms
        # Self-reactions, reaction removals, invalid-reference reactions and
        # deletes never push.  (An *applied* edit or delete still alters the
        # chat view; the simulator logs that separately as a UI artifact.)
        return False


def is_stealthy(kind: ProbeKind, context: StealthContext, policy: MessengerPolicy) -> bool:
    """True iff a probe of ``kind`` produces no notification at the target.

    Raises :class:`UnsupportedProbeKind` for kinds the messenger cannot
    express (e.g. self-reactions on the restrictive policy).
    """
    if kind == ProbeKind.SELF_REACTION and not policy.self_reaction_allowed:
        raise UnsupportedProbeKind(f"self-reactions are not supported on {policy.name}")
    return not policy.notifies_target(kind, context)


def elicits_receipt(
    kind: ProbeKind,
    ref_valid: bool,
    payload_bytes: int,
    policy: MessengerPolicy,
) -> ReceiptDecision:
    """Decide what the service/client pair does with a submitted probe.

    Total function: any combination of inputs maps to a decision.
    Payloads above the server-side limit are rejected before delivery;
    kinds outside ``receipt_actions`` are delivered but never acknowledged;
    oversized reactions are processed and then discarded by the client.
    """
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be >= 0")
    if payload_bytes > policy.payload_limit(kind):
        return ReceiptDecision.REJECTED_BY_SERVER
    if kind not in policy.receipt_actions:
        return ReceiptDecision.SILENTLY_DROPPED
    if kind in REF_KINDS and not ref_valid and not policy.invalid_ref_acked:
        return ReceiptDecision.SILENTLY_DROPPED
    if (
        kind in REACTION_KINDS
        and policy.reaction_handling_limit_bytes is not None
        and payload_bytes > policy.reaction_handling_limit_bytes
        and (ref_valid or policy.handling_limit_applies_to_invalid_refs)
    ):
        return ReceiptDecision.ACKED_BUT_DISCARDED
    return ReceiptDecision.ACKED


def ack_granted(decision: ReceiptDecision, policy: MessengerPolicy) -> bool:
    """Whether a delivered probe with this decision produces a device ack."""
    if decision == ReceiptDecision.ACKED:
        return True
    if decision == ReceiptDecision.ACKED_BUT_DISCARDED:
        return policy.ack_oversized_reactions
    return False


@dataclass
class DeviceDirectory:
    """Server-side list of device indices registered to an account.

    Indices are handed out in strictly increasing order and never reused,
    so an observer can order sessions by creation time.
    """

    account: AccountId
    device_indices: list[int] = field(default_factory=list)
    _retired: set[int] = field(default_factory=set)

    def register_device(self, index: Optional[int] = None) -> int:
        floor = max(self.device_indices, default=-1)
        floor = max(floor, max(self._retired, default=-1))
        if index is None:
            index = floor + 1
        elif index <= floor:
            raise DirectoryIntegrityError(
                f"device index {index} not above all previously issued indices"
            )
        self.device_indices.append(index)
        return index

    def remove_device(self, index: int) -> None:
        self.device_indices.remove(index)
        self._retired.add(index)

    def snapshot(self) -> list[int]:
        return sorted(self.device_indices)

    @property
    def main_device_index(self) -> int:
        if not self.device_indices:
            raise UnregisteredAccountError(f"{self.account} has no devices")
        return min(self.device_indices)


@dataclass(frozen=True)
class ProbeAction:
    """One attacker message.

    ``id`` embeds the zero-padded send sequence number so stacked receipts
    can be re-associated without a lookup table; the hex suffix keeps ids
    opaque on the wire.
    """

    id: str
    seq: int
    kind: ProbeKind
    payload_bytes: int
    ref_valid: bool
    sent_at: int

    def __post_init__(self) -> None:
        if self.kind == ProbeKind.INVALID_REF_REACTION and self.ref_valid:
            raise ValueError("invalid-reference reactions must have ref_valid=False")
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")

    @staticmethod
    def make_id(seq: int, token: str) -> str:
        return f"{seq:08d}-{token}"

    @staticmethod
    def seq_of(probe_id: str) -> int:
        return int(probe_id.split("-", 1)[0])


@dataclass(frozen=True)
class ReceiptEvent:
    """A server ack, device ack or read receipt as seen by the sender.

    Stacked receipts carry several probe ids in one event; ``device_index``
    is None for server acks and for account-synchronized device acks.
    """

    kind: ReceiptKind
    probe_ids: tuple[str, ...]
    observed_at: int
    device_index: Optional[int] = None


@dataclass(frozen=True)
class DeliveryTask:
    """One per-device delivery obligation produced by fanout.

    ``device_index`` is None for synchronized delivery (single receipt for
    the whole account).
    """

    probe_id: str
    device_index: Optional[int]


def fanout(
    probe: ProbeAction, directory: DeviceDirectory, policy: MessengerPolicy
) -> list[DeliveryTask]:
    """Expand an accepted probe into per-device delivery tasks.

    Per-device receipt policies get one task per registered device;
    synchronized policies get exactly one account-level task.
    """
    if not directory.device_indices:
        raise UnregisteredAccountError(f"{directory.account} has no registered devices")
    if policy.per_device_receipts:
        return [DeliveryTask(probe.id, idx) for idx in sorted(directory.device_indices)]
    return [DeliveryTask(probe.id, None)]


def edit_delete_applied(kind: ProbeKind, ref_age_s: float, policy: MessengerPolicy) -> bool:
    """Whether the receiving client applies an edit/delete of this age.

    Probes older than the enforced window are still acknowledged but have
    no effect on the chat.
    """
    if kind == ProbeKind.EDIT:
        return ref_age_s <= policy.edit_window_enforced_s
    if kind == ProbeKind.DELETE:
        return ref_age_s <= policy.delete_window_enforced_s
    return True


def within_enforced_window(kind: ProbeKind, ref_age_s: float, policy: MessengerPolicy) -> bool:
    if kind in (ProbeKind.EDIT, ProbeKind.DELETE):
        return edit_delete_applied(kind, ref_age_s, policy)
    return True


_ALL_KINDS = frozenset(ProbeKind)

# KB/MB are decimal (10^3 / 10^6 bytes) throughout.
KB = 1_000
MB = 1_000_000


def whatsapp_like_policy() -> MessengerPolicy:
    return MessengerPolicy(
        name="whatsapp_like",
        receipt_actions=_ALL_KINDS,
        probe_vocabulary=_ALL_KINDS,
        per_device_receipts=True,
        main_device_index=0,
        self_reaction_allowed=True,
        invalid_ref_acked=True,
        edit_window_announced_s=15 * 60,
        edit_window_enforced_s=20 * 60,
        delete_window_announced_s=48 * 3600,
        delete_window_enforced_s=60 * 3600,
        payload_limits={
            ProbeKind.TEXT_MESSAGE: 65 * KB,
            ProbeKind.EDIT: 65 * KB,
            ProbeKind.REACTION: 1000 * KB,
            ProbeKind.SELF_REACTION: 1000 * KB,
            ProbeKind.REMOVE_REACTION: 1000 * KB,
            ProbeKind.INVALID_REF_REACTION: 1000 * KB,
            ProbeKind.DELETE: 0,
        },
        max_edits=None,
        reaction_handling_limit_bytes=30,
        edit_notifies_platforms=frozenset({"ios"}),
    )


def signal_like_policy() -> MessengerPolicy:
    return MessengerPolicy(
        name="signal_like",
        receipt_actions=_ALL_KINDS,
        probe_vocabulary=_ALL_KINDS,
        per_device_receipts=True,
        main_device_index=1,
        self_reaction_allowed=True,
        invalid_ref_acked=True,
        edit_window_announced_s=24 * 3600,
        edit_window_enforced_s=48 * 3600,
        delete_window_announced_s=24 * 3600,
        delete_window_enforced_s=48 * 3600,
        payload_limits={
            ProbeKind.TEXT_MESSAGE: 194 * KB,
            ProbeKind.EDIT: 194 * KB,
            ProbeKind.REACTION: 194 * KB,
            ProbeKind.SELF_REACTION: 194 * KB,
            ProbeKind.REMOVE_REACTION: 194 * KB,
            ProbeKind.INVALID_REF_REACTION: 194 * KB,
            ProbeKind.DELETE: 0,
        },
        max_edits=10,
        reaction_handling_limit_bytes=None,
    )


def threema_like_policy() -> MessengerPolicy:
    # Reactions exist (to someone else's message) but never produce a
    # receipt; self-reactions, invalid references, edits and deletes cannot
    # be expressed at all.
    return MessengerPolicy(
        name="threema_like",
        receipt_actions=frozenset({ProbeKind.TEXT_MESSAGE}),
        probe_vocabulary=frozenset({ProbeKind.TEXT_MESSAGE, ProbeKind.REACTION}),
        per_device_receipts=False,
        main_device_index=0,
        self_reaction_allowed=False,
        invalid_ref_acked=False,
        edit_window_announced_s=0.0,
        edit_window_enforced_s=0.0,
        delete_window_announced_s=0.0,
        delete_window_enforced_s=0.0,
        payload_limits={
            ProbeKind.TEXT_MESSAGE: 65 * KB,
            ProbeKind.REACTION: 65 * KB,
        },
        max_edits=None,
        reaction_handling_limit_bytes=None,
    )


POLICY_BUILDERS = {
    "whatsapp_like": whatsapp_like_policy,
    "signal_like": signal_like_policy,
    "threema_like": threema_like_policy,
}


def policy_by_name(name: str) -> MessengerPolicy:
    try:
        return POLICY_BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; expected one of {sorted(POLICY_BUILDERS)}")


def with_policy_overrides(policy: MessengerPolicy, **overrides) -> MessengerPolicy:
    return replace(policy, **overrides)
