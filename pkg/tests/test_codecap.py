import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from codecaps.certchain import Certificate, Heritage, validate_heritage
from codecaps.codecap import (
    STAGE_HERITAGE,
    STAGE_NONE,
    STAGE_REQUEST_SIGNATURE,
    STAGE_RIGHTS,
    STAGE_TRANSPORT,
    STAGE_VERSION,
    Codecap,
    CodecapError,
    DelegationDepthExhausted,
    KeyNotOnHeritage,
    amplify,
    authorize,
    confine,
    delegate,
    mint_root,
    sign_request,
)
from helpers import NOW, ChainBuilder, decide
from oracles import TABLE_RIGHTS, UNIVERSE, all_chains, oracle_allows

OFFSET_RULE = 'request.type == "READ" && request.offset >= 256'


@pytest.fixture
def chains(keys):
    return ChainBuilder(keys)


# -- mint ---------------------------------------------------------------------------


def test_mint_minimal(keys):
    h = mint_root(keys[0], keys[1].public_key, "1", 4, "o1", 0)
    assert len(h) == 1
    a = h.first.attrs
    assert (a["pubkey"], a["issuerPubkey"], a["objectId"], a["version"], a["pLength"]) == (
        keys[1].public_hex, keys[0].public_hex, "o1", 0, 4
    )
    assert validate_heritage(keys[0].public_key, h).ok


def test_mint_rejects_bad_rights(keys):
    with pytest.raises(CodecapError):
        mint_root(keys[0], keys[1].public_key, "1 +", 4, "o1", 0)


def test_mint_rejects_negative_plength(keys):
    with pytest.raises(CodecapError):
        mint_root(keys[0], keys[1].public_key, "1", -1, "o1", 0)


def test_mint_is_deterministic(keys):
    a = mint_root(keys[0], keys[1].public_key, "1", 4, "o1", 0)
    b = mint_root(keys[0], keys[1].public_key, "1", 4, "o1", 0)
    assert a.encode() == b.encode()


def test_minted_read_cap_allows_read(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, 'request.type == "READ"', 4, "o", 0), keys[1])
    r = sign_request(c, {"type": "READ"}, now=NOW)
    assert authorize(keys[0].public_key, c.heritage, r, keys[1].public_key, NOW).allowed


def test_codecap_key_must_match(keys):
    h = mint_root(keys[0], keys[1].public_key, "1", 4)
    with pytest.raises(CodecapError):
        Codecap(h, keys[2])


# -- delegate -----------------------------------------------------------------------


def test_delegate_grows_chain(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    h = delegate(c, keys[2].public_key, "1", 3)
    assert len(h) == 2
    assert h.prefix(1) == c.heritage
    assert h.last.issuer_pubkey == keys[1].public_hex
    assert validate_heritage(keys[0].public_key, h).ok


def test_delegate_from_zero_plength(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 0, "o", 0), keys[1])
    with pytest.raises(DelegationDepthExhausted, match="delegation depth exhausted"):
        delegate(c, keys[2].public_key, "1", 0)


@pytest.mark.parametrize("p", [4, 5, -1])
def test_delegate_plength_must_shrink(keys, p):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    with pytest.raises(CodecapError):
        delegate(c, keys[2].public_key, "1", p)


def test_delegate_rejects_bad_rights(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    with pytest.raises(CodecapError):
        delegate(c, keys[2].public_key, "(", 3)


def test_delegated_restriction_denies(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    c2 = Codecap(delegate(c, keys[2].public_key, "request.offset >= 256", 3), keys[2])
    d = decide(keys, c2, ("READ", 0))
    assert (d.allowed, d.failing_stage, d.failing_index, d.stage_code) == (False, STAGE_RIGHTS, 2, "rights(2)")
    assert decide(keys, c, ("READ", 0)).allowed


def test_outputs_never_contain_private_keys(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    h = delegate(c, keys[2].public_key, "1", 3)
    text = h.encode().encode() + b"".join(cert.to_bytes() for cert in h)
    r = sign_request(c, {"type": "READ"})
    for k in keys[:3]:
        assert k.private_key not in text
        assert k.private_key.hex().encode() not in text
        assert k.private_key not in r.to_bytes()


# -- confine ------------------------------------------------------------------------


def test_confine_shape():
    assert confine("1") == "(isLast) && (1)"


def test_confine_rejects_bad_source():
    with pytest.raises(CodecapError):
        confine("1 +")


def test_confined_then_extended_denies_everything(keys, chains):
    c1 = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    c2 = Codecap(delegate(c1, keys[2].public_key, confine("1"), 3), keys[2])
    c3 = Codecap(delegate(c2, keys[3].public_key, "1", 2), keys[3])
    for req in UNIVERSE:
        assert decide(keys, c2, req).allowed
        d = decide(keys, c3, req)
        assert not d.allowed and d.stage_code == "rights(2)"


# -- amplify ------------------------------------------------------------------------


def test_amplify_cuts_to_holder(keys, chains):
    full = chains.heritage((0, 4, 3))
    amp = amplify(full, keys[1])
    assert amp.heritage == full.prefix(1)
    assert amp.heritage.certs[0].to_bytes() == full.certs[0].to_bytes()
    assert amplify(full, keys[2]).heritage == full.prefix(2)
    assert amplify(full, keys[3]).heritage == full


def test_amplify_absent_key(keys, chains):
    with pytest.raises(KeyNotOnHeritage, match="key not on heritage"):
        amplify(chains.heritage((0, 0)), keys[4])


def test_amplify_deepest_occurrence(keys):
    # a key that appears twice resolves to its later certificate
    h = mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0)
    h = delegate(Codecap(h, keys[1]), keys[2].public_key, "1", 3)
    h = delegate(Codecap(h, keys[2]), keys[1].public_key, "1", 2)
    h = delegate(Codecap(h, keys[1]), keys[3].public_key, "1", 1)
    assert len(amplify(h, keys[1]).heritage) == 3


def test_amplify_widens(keys):
    c1 = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    c2 = Codecap(delegate(c1, keys[2].public_key, OFFSET_RULE, 3), keys[2])
    assert not decide(keys, c2, ("WRITE", 0)).allowed
    amp = amplify(c2.heritage, keys[1])
    assert decide(keys, amp, ("WRITE", 0)).allowed


# -- sign_request ---------------------------------------------------------------------


def test_sign_request_fills_fields(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4), keys[1])
    r = sign_request(c, {"type": "READ", "uri": "/x"})
    assert r.verify()
    assert r.signer_pubkey == keys[1].public_hex
    assert {"nonce", "timestamp"} <= set(r.attrs)


def test_sign_request_needs_type(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4), keys[1])
    with pytest.raises(CodecapError):
        sign_request(c, {"uri": "/x"})


def test_cross_paired_request_fails_signature_stage(keys, chains):
    a, b = chains.codecap((0,)), chains.codecap((0, 0))
    r = sign_request(b, {"type": "READ"}, now=NOW)
    d = authorize(keys[0].public_key, a.heritage, r, keys[1].public_key, NOW)
    assert d.failing_stage == STAGE_REQUEST_SIGNATURE


def test_tampered_request_fails_signature_stage(keys, chains):
    c = chains.codecap((0,))
    r = sign_request(c, {"type": "READ", "offset": 0}, now=NOW)
    forged = type(r)({**r.attrs, "offset": 300}, r.signature)
    d = authorize(keys[0].public_key, c.heritage, forged, keys[1].public_key, NOW)
    assert d.failing_stage == STAGE_REQUEST_SIGNATURE


# -- authorize ----------------------------------------------------------------------


def test_authorize_trivial(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    d = decide(keys, c, ("READ", 0))
    assert d.allowed and d.failing_stage == STAGE_NONE and len(d.rights_outcomes) == 1


def test_authorize_offset_rule(keys):
    c = Codecap(mint_root(keys[0], keys[1].public_key, OFFSET_RULE, 4, "o", 0), keys[1])
    assert decide(keys, c, ("READ", 300)).allowed
    d = decide(keys, c, ("READ", 100))
    assert not d.allowed and d.stage_code == "rights(1)"


def test_transport_binding(keys, chains):
    c = chains.codecap((0,))
    assert decide(keys, c, ("READ", 0), transport_pub=keys[2].public_key).failing_stage == STAGE_TRANSPORT
    assert decide(keys, c, ("READ", 0), transport_pub=None).failing_stage == STAGE_TRANSPORT
    assert decide(keys, c, ("READ", 0), transport_pub=None, allow_unauthenticated=True).allowed


def test_heritage_stage(keys, chains):
    c = chains.codecap((0, 0))
    bad = Heritage((c.heritage.certs[0], Certificate({**c.heritage.certs[1].attrs, "rights": "1"}, c.heritage.certs[1].signature)))
    d = decide(keys, Codecap(bad, keys[2]), ("READ", 0))
    assert (d.failing_stage, d.failing_index) == (STAGE_HERITAGE, 2)


def test_version_stage(keys, chains):
    c = chains.codecap((0,))
    assert decide(keys, c, ("READ", 0), current_version=0).allowed
    d = decide(keys, c, ("READ", 0), current_version=1)
    assert d.failing_stage == STAGE_VERSION
    # service-wide caps carry no version and skip the gate
    f = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4), keys[1])
    assert decide(keys, f, ("READ", 0), current_version=7).allowed


def test_stage_order_transport_before_heritage(keys, chains):
    c = chains.codecap((0,))
    d = authorize(keys[4].public_key, c.heritage, sign_request(c, {"type": "READ"}), keys[2].public_key, NOW)
    assert d.failing_stage == STAGE_TRANSPORT


def test_rights_idx_is_zero_based(keys):
    h = mint_root(keys[0], keys[1].public_key, "idx == 0", 4, "o", 0)
    h = delegate(Codecap(h, keys[1]), keys[2].public_key, "idx == 1 && heritage[idx].pubkey == request.signerPubkey", 3)
    assert decide(keys, Codecap(h, keys[2]), ("READ", 0)).allowed


def test_authorize_is_pure(keys, chains):
    c = chains.codecap((3, 4))
    r = sign_request(c, {"type": "READ", "offset": 300}, now=NOW, nonce="x")
    d1 = authorize(keys[0].public_key, c.heritage, r, keys[2].public_key, NOW)
    d2 = authorize(keys[0].public_key, c.heritage, r, keys[2].public_key, NOW)
    assert d1 == d2 and d1.allowed


def test_authorize_matches_oracle_on_table_chains(keys, chains):
    """Chains of length <= 2 here; the acceptance suite covers length 3."""
    for idx in all_chains(max_len=2):
        c = chains.codecap(idx)
        for req in UNIVERSE:
            assert decide(keys, c, req).allowed == oracle_allows(idx, req), (idx, req)


@given(st.lists(st.integers(0, len(TABLE_RIGHTS) - 1), min_size=1, max_size=3), st.sampled_from(UNIVERSE), st.integers(0, 5))
def test_extension_never_widens(keys, idx, req, extra):
    chains = ChainBuilder(keys, max_len=4)
    base = chains.codecap(idx)
    if len(idx) < 3:
        longer = chains.codecap(list(idx) + [extra])
        assert decide(keys, longer, req).allowed <= decide(keys, base, req).allowed


@given(st.integers(0, 2**32))
def test_random_confined_chains_deny(keys, seed):
    rng = random.Random(seed)
    inner = TABLE_RIGHTS[rng.randrange(len(TABLE_RIGHTS))][0]
    c1 = Codecap(mint_root(keys[0], keys[1].public_key, "1", 4, "o", 0), keys[1])
    c2 = Codecap(delegate(c1, keys[2].public_key, confine(inner), 3), keys[2])
    c3 = Codecap(delegate(c2, keys[3].public_key, TABLE_RIGHTS[rng.randrange(6)][0], rng.randrange(3)), keys[3])
    req = rng.choice(UNIVERSE)
    d = decide(keys, c3, req)
    assert not d.allowed and d.stage_code == "rights(2)"
