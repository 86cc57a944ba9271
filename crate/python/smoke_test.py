"""Smoke test for the anonlimit_py extension module."""

import json
import pathlib

import anonlimit_py as al

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def daa_round_trip():
    isk, gpk = al.setup()
    assert gpk.verify_proofs()
    assert al.GroupPublicKey.from_bytes(gpk.to_bytes()) == gpk
    user = al.UserIdentity()
    gsk, req = al.join_user_init(gpk, user)
    try:
        al.join_issuer(isk, gpk, req, [])
        raise AssertionError("unregistered join succeeded")
    except al.AnonlimitError:
        pass
    cred = al.join_user_finish(gpk, gsk, al.join_issuer(isk, gpk, req, [user.public_key()]))

    s1 = al.sign(gsk, cred, b"bsn", b"m1")
    s2 = al.sign(gsk, cred, b"bsn", b"m2")
    s3 = al.sign(gsk, cred, b"other", b"m1")
    assert al.verify(gpk, b"bsn", b"m1", s1)
    assert not al.verify(gpk, b"bsn", b"m2", s1)
    assert len(s1.to_bytes()) == al.SIGNATURE_LEN
    assert s1.tag() == s2.tag() != s3.tag()
    assert al.link(gpk, s1, b"bsn", b"m1", s2, b"bsn", b"m2") == "linked"
    assert al.link(gpk, s1, b"bsn", b"m1", s3, b"other", b"m1") == "unlinked"
    assert al.link(gpk, s1, b"bsn", b"m2", s2, b"bsn", b"m2") == "invalid"


def rules_and_fpe():
    key = bytes(range(16))
    perm = sorted(al.fpe_encrypt(key, 10, v) for v in range(10))
    assert perm == list(range(10))

    rs = al.compile_ruleset((FIXTURES / "rulesets" / "query-log.json").read_text())
    state = al.TagState()
    t = 1_700_000_100
    msg = lambda i: json.dumps({"query": f"hotel {i}"})
    try:
        al.build_basenames(rs, msg(0), t, state)
        al.build_basenames(rs, msg(0), t, state)
        raise AssertionError("per-query quota not enforced")
    except al.AnonlimitError:
        pass
    seen = set()
    for i in range(1, 5):
        for b in al.build_basenames(rs, msg(i), t, state):
            digest, period, nonce = al.parse_basename(b)
            assert al.canonical_basename(digest, period, nonce) == b
            seen.add(b)
    assert len(seen) == 8
    assert state.used("ql-service-1", t // 86400) == 5
    try:
        al.build_basenames(rs, msg(9), t, state)
        raise AssertionError("quota not enforced")
    except al.AnonlimitError:
        pass


def deployment():
    rs = al.compile_ruleset((FIXTURES / "rulesets" / "heatmap.json").read_text())
    d = al.Deployment([rs])
    c = d.add_client()
    assert d.send(c, rs.version, json.dumps({"lat": 1})) == "accepted"
    assert d.tag_count() == 1
    assert json.loads(d.collected()[0]) == {"lat": 1}
    assert d.client_status(c) == "active"
    assert d.rotate() is None
    epoch_id, expiry = d.current_epoch()
    d.set_time(expiry)
    assert d.rotate() == epoch_id + 1
    assert d.tag_count() == 0


def scenario():
    path = FIXTURES / "scenarios" / "survey-flood.json"
    report = json.loads(al.run_scenario(path.read_text(), str(path.parent), True))
    assert report["submitted"] == 50 and report["accepted"] == 1
    rows = json.loads(al.bench("sign,verify", 2))["rows"]
    assert [r["op"] for r in rows] == ["sign", "verify"]


if __name__ == "__main__":
    for check in (daa_round_trip, rules_and_fpe, deployment, scenario):
        check()
        print(f"{check.__name__}: ok")
