use anonlimit_py::anonlimit_py;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    pyo3::append_to_inittab!(anonlimit_py);
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let globals = PyDict::new_bound(py);
        let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");
        globals.set_item("FIXTURES", fixtures).unwrap();
        py.run_bound("import anonlimit_py as al, json", Some(&globals), None).unwrap();
        if let Err(e) = py.run_bound(code, Some(&globals), None) {
            e.display(py);
            panic!("python check failed");
        }
    });
}

#[test]
fn bindings_exercise_the_core() {
    run(r#"
isk, gpk = al.setup()
user = al.UserIdentity(bytes(32))
assert user.public_key() == al.UserIdentity(bytes(32)).public_key()
gsk, req = al.join_user_init(gpk, user)
assert al.JoinRequest.from_bytes(req.to_bytes()).to_bytes() == req.to_bytes()
cred = al.join_user_finish(gpk, gsk, al.join_issuer(isk, gpk, req, [user.public_key()]))
s1 = al.sign(gsk, cred, b"b", b"m")
s2 = al.Signature.from_bytes(al.sign(gsk, cred, b"b", b"n").to_bytes())
assert al.verify(gpk, b"b", b"m", s1) and not al.verify(gpk, b"c", b"m", s1)
assert al.link(gpk, s1, b"b", b"m", s2, b"b", b"n") == "linked"

_, other = al.setup()
try:
    al.join_user_finish(other, gsk, cred)
    raise AssertionError("foreign credential accepted")
except al.AnonlimitError:
    pass

assert al.normalize_query("  Hotels   PARIS ") == al.normalize_query("hotel paris")
assert al.parse_basename("v1|a|b|3|4") == ("a|b", 3, 4)
try:
    al.parse_basename("v1|a|03|4")
    raise AssertionError("non-canonical basename parsed")
except al.AnonlimitError:
    pass
assert al.COLLECT_REQUEST_LEN == 16384 and al.COLLECT_ACK_LEN == 32

rs = al.compile_ruleset(open(FIXTURES + "/rulesets/survey.json").read())
rs.check_key_lifetime(86400)
d = al.Deployment([rs])
c = d.add_client()
m = json.dumps({"survey_id": "s1", "answer": 1})
assert d.send(c, rs.version, m) == "accepted"
try:
    d.send(c, rs.version, m)
    raise AssertionError("second answer sent")
except al.AnonlimitError:
    pass
assert json.loads(d.stats())["accepted"] == 1
"#);
}
