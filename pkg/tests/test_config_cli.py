import hashlib
from pathlib import Path

import pytest

from omnidistill import cli
from omnidistill import config as C

TINY = """\
# small enough for a few seconds per command
N = 60
n_test = 40
d_in = 6, 5, 7
latent_dim = 4
num_classes = 5
d = 4
epochs = 3
num_experts = 2
batch_size = 20
n = 6
iterations = 3
syn_steps = 2
expert_epochs = 1
max_start_epoch = 1
mini_batch_size = 6
sim_rank = 2
eval_epochs = 2
seeds = 0, 1
trials = 2
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_parse_rejects_unknown_and_duplicate():
    assert C.parse("n = 5  # trailing\nd_in = 1,2,3\n") == {"n": 5, "d_in": (1, 2, 3)}
    with pytest.raises(C.ConfigError, match="unknown"):
        C.parse("bogus = 1")
    with pytest.raises(C.ConfigError, match="duplicate"):
        C.parse("n = 1\nn = 2")
    with pytest.raises(C.ConfigError, match="bad value"):
        C.parse("n = five")
    with pytest.raises(C.ConfigError):
        C.parse("just words")


def test_precedence(tiny):
    assert C.resolve(tiny, env={}).seed == 0
    assert C.resolve(tiny, env={C.SEED_ENV: "7"}).seed == 7
    assert C.resolve(tiny, {"seed": "8"}, env={C.SEED_ENV: "7"}).seed == 8
    assert C.resolve(tiny, {"seed": "8"}, seed=9, env={C.SEED_ENV: "7"}).seed == 9
    assert C.resolve(tiny, {"n": "4"}, env={}).n == 4


def test_validate():
    with pytest.raises(C.ConfigError):
        C.resolve(overrides={"d_in": "3,4"}, env={})
    with pytest.raises(C.ConfigError):
        C.resolve(overrides={"max_start_epoch": "10"}, env={})


def test_dumps_roundtrip():
    cfg = C.resolve(overrides={"seeds": "3,4", "lr_data": "0.25"}, env={})
    assert C.resolve(overrides=C.parse(cfg.dumps()), env={}) == cfg
    assert cfg.digest() != C.RunConfig().digest()


def run(tmp_path, name, *argv):
    run_dir = tmp_path / name
    code = cli.main([*argv, "--run-dir", str(run_dir)])
    return code, run_dir


def _pipeline(tmp_path, tiny, tag):
    common = ["--config", str(tiny)]
    code, data = run(tmp_path, f"{tag}-data", "gen-data", *common)
    assert code == 0
    code, buf = run(tmp_path, f"{tag}-buf", "buffer", *common, "--data", str(data))
    assert code == 0
    code, syn = run(tmp_path, f"{tag}-syn", "distill", *common, "--data", str(data), "--buffer", str(buf / "buffer.omtb"))
    assert code == 0
    code, ev = run(tmp_path, f"{tag}-eval", "eval", *common, "--data", str(data), "--artifact", str(syn / "synthetic.omss"))
    assert code == 0
    code, rnd = run(tmp_path, f"{tag}-rand", "eval", *common, "--data", str(data), "--baseline", "random", "--n", "6")
    assert code == 0
    return [data, buf, syn, ev, rnd]


def _digests(run_dir: Path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(run_dir.iterdir())}


def test_pipeline_is_deterministic(tmp_path, tiny, monkeypatch):
    monkeypatch.delenv(C.SEED_ENV, raising=False)
    first = _pipeline(tmp_path, tiny, "a")
    second = _pipeline(tmp_path, tiny, "b")
    for a, b in zip(first, second):
        da, db = _digests(a), _digests(b)
        assert "run.log" in da and "config.resolved" in da
        assert da == db, a.name
    assert {"train.omds", "test.omds"} <= set(_digests(first[0]))
    assert "\nAvg," in (first[3] / "report.csv").read_text()


def test_exit_codes(tmp_path, tiny, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["distill", "--method", "nope"])
    assert exc.value.code == 1
    assert cli.main(["gen-data", "--set", "bogus=1", "--run-dir", str(tmp_path / "x")]) == 1
    busy = tmp_path / "busy"
    busy.mkdir()
    (busy / "keep").write_text("x")
    assert cli.main(["gen-data", "--config", str(tiny), "--run-dir", str(busy)]) == 1
    assert (busy / "keep").read_text() == "x"
    code, _ = run(tmp_path, "missing", "buffer", "--config", str(tiny), "--data", str(tmp_path / "nowhere"))
    assert code == 1
    code, data = run(tmp_path, "data", "gen-data", "--config", str(tiny))
    (tmp_path / "junk.omss").write_bytes(b"not a synthetic set")
    code, _ = run(tmp_path, "corrupt", "eval", "--config", str(tiny), "--data", str(data), "--artifact", str(tmp_path / "junk.omss"))
    assert code == 2
    code, _ = run(tmp_path, "ok", "verify", "--config", str(tiny), "--suite", "lemma1")
    assert code == 0


def test_verify_failure_exit_code(tmp_path, tiny, monkeypatch):
    monkeypatch.setattr(cli.theory, "gradient_suite", lambda n, seed: {"sigma1": [1.0]})
    code, run_dir = run(tmp_path, "v", "verify", "--config", str(tiny), "--suite", "gradients")
    assert code == 3
    assert "verification failed" in (run_dir / "run.log").read_text()


def test_verify_suites(tmp_path, tiny):
    code, run_dir = run(tmp_path, "g", "verify", "--config", str(tiny), "--suite", "gradients")
    assert code == 0
    rows = (run_dir / "gradients.csv").read_text().splitlines()
    assert rows[0] == "check,instance,rel_error" and sum(r.startswith("meta_t") for r in rows) >= 40
    code, run_dir = run(tmp_path, "t", "verify", "--config", str(tiny), "--suite", "theorem1")
    assert code == 0
    assert len((run_dir / "verification.csv").read_text().splitlines()) == 3


def test_auto_run_dir_naming(tmp_path, tiny):
    out = tmp_path / "runs"
    for _ in range(2):
        assert cli.main(["verify", "--config", str(tiny), "--suite", "lemma1", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 2 and all("-verify-" in n for n in names)
