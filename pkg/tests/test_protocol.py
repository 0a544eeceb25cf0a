import pytest
from hypothesis import given, strategies as st

from receiptsim.protocol import (
    AccountId,
    DeviceDirectory,
    DirectoryIntegrityError,
    MessengerPolicy,
    ProbeAction,
    ProbeKind,
    ReceiptDecision,
    StealthContext,
    UnregisteredAccountError,
    UnsupportedProbeKind,
    edit_delete_applied,
    elicits_receipt,
    fanout,
    is_stealthy,
    policy_by_name,
    whatsapp_like_policy,
    signal_like_policy,
    threema_like_policy,
)

WA = whatsapp_like_policy()
SIG = signal_like_policy()
TH = threema_like_policy()


class TestStealthiness:
    def test_self_reaction_is_stealthy_in_existing_conversation(self):
        ctx = StealthContext(existing_conversation=True, reacts_to_own_message=True)
        assert is_stealthy(ProbeKind.SELF_REACTION, ctx, WA) is True

    def test_text_message_never_stealthy(self):
        for policy in (WA, SIG, TH):
            for platform in ("android", "ios", "web"):
                ctx = StealthContext(target_platform=platform)
                assert is_stealthy(ProbeKind.TEXT_MESSAGE, ctx, policy) is False

    def test_invalid_ref_reaction_rejected_on_restrictive_policy(self):
        ctx = StealthContext(existing_conversation=False)
        with pytest.raises(UnsupportedProbeKind):
            is_stealthy(ProbeKind.INVALID_REF_REACTION, ctx, TH)

    def test_self_reaction_rejected_on_restrictive_policy(self):
        with pytest.raises(UnsupportedProbeKind):
            is_stealthy(ProbeKind.SELF_REACTION, StealthContext(), TH)

    def test_remove_reaction_stealthy_on_both_permissive_policies(self):
        ctx = StealthContext(existing_conversation=True)
        assert is_stealthy(ProbeKind.REMOVE_REACTION, ctx, WA)
        assert is_stealthy(ProbeKind.REMOVE_REACTION, ctx, SIG)

    def test_invalid_ref_reaction_stealthy_for_strangers(self):
        ctx = StealthContext(existing_conversation=False)
        assert is_stealthy(ProbeKind.INVALID_REF_REACTION, ctx, WA)
        assert is_stealthy(ProbeKind.INVALID_REF_REACTION, ctx, SIG)

    def test_reaction_to_targets_message_notifies(self):
        ctx = StealthContext(existing_conversation=True, reacts_to_own_message=False)
        assert is_stealthy(ProbeKind.REACTION, ctx, WA) is False

    def test_edit_notifies_ios_targets_only_on_whatsapp_like(self):
        ios = StealthContext(existing_conversation=True, target_platform="ios")
        android = StealthContext(existing_conversation=True, target_platform="android")
        assert is_stealthy(ProbeKind.EDIT, ios, WA) is False
        assert is_stealthy(ProbeKind.EDIT, android, WA) is True
        assert is_stealthy(ProbeKind.EDIT, ios, SIG) is True

    def test_delete_does_not_push(self):
        ctx = StealthContext(existing_conversation=True)
        assert is_stealthy(ProbeKind.DELETE, ctx, WA)
        assert is_stealthy(ProbeKind.DELETE, ctx, SIG)


class TestElicitsReceipt:
    def test_invalid_ref_small_reaction_acked(self):
        assert (
            elicits_receipt(ProbeKind.REACTION, False, 8, WA) == ReceiptDecision.ACKED
        )

    def test_reaction_above_server_limit_rejected(self):
        assert (
            elicits_receipt(ProbeKind.REACTION, True, 2_000_000, WA)
            == ReceiptDecision.REJECTED_BY_SERVER
        )

    def test_delete_silently_dropped_on_restrictive_policy(self):
        assert (
            elicits_receipt(ProbeKind.DELETE, True, 0, TH)
            == ReceiptDecision.SILENTLY_DROPPED
        )

    def test_oversized_reaction_discarded_but_processed(self):
        assert (
            elicits_receipt(ProbeKind.REACTION, True, 1000, WA)
            == ReceiptDecision.ACKED_BUT_DISCARDED
        )

    def test_handling_limit_boundary_is_exclusive(self):
        assert elicits_receipt(ProbeKind.REACTION, True, 30, WA) == ReceiptDecision.ACKED
        assert (
            elicits_receipt(ProbeKind.REACTION, True, 31, WA)
            == ReceiptDecision.ACKED_BUT_DISCARDED
        )

    def test_no_handling_limit_on_signal_like(self):
        assert (
            elicits_receipt(ProbeKind.REACTION, True, 100_000, SIG)
            == ReceiptDecision.ACKED
        )

    def test_invalid_ref_dropped_when_policy_validates(self):
        assert (
            elicits_receipt(ProbeKind.REACTION, False, 8, TH)
            == ReceiptDecision.SILENTLY_DROPPED
        )

    def test_restrictive_policy_never_acks_non_text(self):
        for kind in ProbeKind:
            if kind == ProbeKind.TEXT_MESSAGE:
                continue
            ref_valid = kind != ProbeKind.INVALID_REF_REACTION
            assert elicits_receipt(kind, ref_valid, 0, TH) != ReceiptDecision.ACKED

    @given(
        kind=st.sampled_from(list(ProbeKind)),
        ref_valid=st.booleans(),
        payload=st.integers(min_value=0, max_value=5_000_000),
        policy=st.sampled_from([WA, SIG, TH]),
    )
    def test_total_function(self, kind, ref_valid, payload, policy):
        decision = elicits_receipt(kind, ref_valid, payload, policy)
        assert isinstance(decision, ReceiptDecision)


class TestWindows:
    def test_enforced_windows_never_shorter_than_announced(self):
        for policy in (WA, SIG, TH):
            assert policy.edit_window_enforced_s >= policy.edit_window_announced_s
            assert policy.delete_window_enforced_s >= policy.delete_window_announced_s

    def test_shorter_enforced_window_is_invalid(self):
        import dataclasses

        with pytest.raises(ValueError):
            dataclasses.replace(WA, edit_window_enforced_s=60.0)

    def test_whatsapp_like_window_values(self):
        assert WA.delete_window_announced_s == 48 * 3600
        assert WA.delete_window_enforced_s == 60 * 3600
        assert WA.edit_window_announced_s == 15 * 60
        assert WA.edit_window_enforced_s == 20 * 60

    def test_signal_like_window_values(self):
        assert SIG.edit_window_announced_s == 24 * 3600
        assert SIG.edit_window_enforced_s == 48 * 3600
        assert SIG.max_edits == 10

    def test_out_of_window_delete_still_acked_but_not_applied(self):
        age = WA.delete_window_enforced_s + 1
        assert elicits_receipt(ProbeKind.DELETE, True, 0, WA) == ReceiptDecision.ACKED
        assert edit_delete_applied(ProbeKind.DELETE, age, WA) is False
        assert edit_delete_applied(ProbeKind.DELETE, age - 2, WA) is True


class TestFanout:
    def _directory(self, indices):
        d = DeviceDirectory(account=AccountId("victim"))
        for i in indices:
            d.register_device(i)
        return d

    def _probe(self, kind=ProbeKind.INVALID_REF_REACTION):
        return ProbeAction(
            id=ProbeAction.make_id(0, "ab"), seq=0, kind=kind, payload_bytes=8,
            ref_valid=False, sent_at=0,
        )

    def test_per_device_policy_fans_to_every_device(self):
        tasks = fanout(self._probe(), self._directory([0, 1, 9]), WA)
        assert [t.device_index for t in tasks] == [0, 1, 9]

    def test_single_device(self):
        tasks = fanout(self._probe(), self._directory([1]), SIG)
        assert [t.device_index for t in tasks] == [1]

    def test_synchronized_policy_yields_one_task(self):
        probe = ProbeAction(
            id=ProbeAction.make_id(0, "ab"), seq=0, kind=ProbeKind.TEXT_MESSAGE,
            payload_bytes=1, ref_valid=True, sent_at=0,
        )
        tasks = fanout(probe, self._directory([0, 1]), TH)
        assert len(tasks) == 1
        assert tasks[0].device_index is None

    def test_empty_directory_is_an_error(self):
        with pytest.raises(UnregisteredAccountError):
            fanout(self._probe(), DeviceDirectory(account=AccountId("ghost")), WA)


class TestDeviceDirectory:
    def test_auto_increment_and_main_index(self):
        d = DeviceDirectory(account=AccountId("v"))
        assert d.register_device() == 0
        assert d.register_device() == 1
        assert d.main_device_index == 0

    def test_explicit_indices_must_increase(self):
        d = DeviceDirectory(account=AccountId("v"))
        d.register_device(0)
        d.register_device(9)
        with pytest.raises(DirectoryIntegrityError):
            d.register_device(5)

    def test_indices_never_reused_after_removal(self):
        d = DeviceDirectory(account=AccountId("v"))
        d.register_device(0)
        d.register_device(1)
        d.remove_device(1)
        with pytest.raises(DirectoryIntegrityError):
            d.register_device(1)
        assert d.register_device() == 2

    def test_main_device_index_matches_policy(self):
        assert WA.main_device_index == 0
        assert SIG.main_device_index == 1


class TestProbeAction:
    def test_invalid_ref_kind_requires_invalid_ref(self):
        with pytest.raises(ValueError):
            ProbeAction(
                id="x", seq=0, kind=ProbeKind.INVALID_REF_REACTION, payload_bytes=0,
                ref_valid=True, sent_at=0,
            )

    def test_id_embeds_sequence(self):
        pid = ProbeAction.make_id(42, "deadbeef")
        assert ProbeAction.seq_of(pid) == 42
        assert pid.startswith("00000042-")

    def test_ids_sort_in_send_order(self):
        ids = [ProbeAction.make_id(i, "ff") for i in (3, 11, 7, 0)]
        assert sorted(ids) == [ProbeAction.make_id(i, "ff") for i in (0, 3, 7, 11)]


def test_policy_lookup():
    assert policy_by_name("whatsapp_like").name == "whatsapp_like"
    with pytest.raises(ValueError):
        policy_by_name("telegram_like")
