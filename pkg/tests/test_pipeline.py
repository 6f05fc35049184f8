import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from instslam.cli import main
from instslam.config import ConfigError, PipelineConfig, dump_config, load_config, parse_pairs
from instslam.pipeline import chunk_ranges, expected_chunk_count, run

SMALL = ["chunk_size=12", "chunk_overlap=6"]
DRIFT = SMALL + ["scene.drift=0.002,0,0,0,0,0.004,0.004"]


def metrics(path):
    out = {}
    for ln in path.read_text().splitlines():
        k, v = ln.split("=", 1)
        out[k] = float(v)
    return out


def test_chunk_ranges_cover_frames_with_overlap():
    r = chunk_ranges(60, 12, 6)
    assert r[0] == list(range(12)) and r[1][0] == 6 and r[-1][-1] == 59
    assert all(len(set(a) & set(b)) == 6 for a, b in zip(r, r[1:]))
    r3 = chunk_ranges(60, 12, 6, 3)
    assert r3[0] == list(range(0, 36, 3))
    assert len(r3) == expected_chunk_count(60, 12, 6, 3) == 3
    assert chunk_ranges(5, 12, 6) == [list(range(5))]


@given(st.integers(1, 400), st.integers(2, 30), st.integers(0, 29), st.integers(1, 5))
def test_property_chunk_count_formula(n, size, overlap, rate):
    if overlap >= size:
        return
    r = chunk_ranges(n, size, overlap, rate)
    assert len(r) == expected_chunk_count(n, size, overlap, rate)
    assert sorted(set(i for c in r for i in c)) == list(range(0, n, rate))
    m = math.ceil(n / rate)
    assert len(r) == 1 if m <= size else len(r) == math.ceil((m - overlap) / (size - overlap))


def test_config_parsing_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nchunk_size=40\nchunk_overlap=10\ncluster.epsilon=0.8\nkernel.huber_delta=none\n")
    cfg = load_config(p, ["loop.radius=5", "scene.drift=0,0,0,0,0,0.01,0"])
    assert cfg.chunk_size == 40 and cfg.cluster.epsilon == 0.8
    assert cfg.loop.cluster.epsilon == 0.8
    assert cfg.kernel.huber_delta is None and cfg.loop.radius == 5.0
    assert cfg.scene.drift[5] == 0.01
    again = load_config(None, dump_config(cfg).splitlines())
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize("bad", [["nope=1"], ["cluster.nope=1"], ["bogus.x=1"], ["chunk_size=abc"],
                                 ["chunk_overlap=200"], ["loop_mode=sometimes"], ["cluster.epsilon=2"],
                                 ["no_equals_sign"]])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_parse_pairs_skips_comments():
    assert parse_pairs(["# x", "", " a = 1 "]) == {"a": "1"}
    assert PipelineConfig().loop_mode == "per_loop"


def test_zero_noise_run_is_exact(tmp_path):
    cfg = load_config(None, SMALL + [f"output_dir={tmp_path}"])
    man = run(cfg)
    m = metrics(tmp_path / "metrics.txt")
    assert m["ate.post_opt"] < 1e-6 and m["loops.accepted"] >= 1
    assert man.n_chunks == expected_chunk_count(60, 12, 6)
    for name in ("report.txt", "timing.txt", "map.bin", "map.ply", "graph.g2o", "trajectory_est.txt",
                 "associations.tsv", "loops.tsv", "config.txt", "manifest.json"):
        assert (tmp_path / name).exists(), name
    assert json.loads((tmp_path / "manifest.json").read_text())["n_frames"] == 60


def test_drift_run_improves_trajectory_and_map(tmp_path):
    run(load_config(None, DRIFT + [f"output_dir={tmp_path}"]))
    m = metrics(tmp_path / "metrics.txt")
    assert m["loops.accepted"] >= 1
    assert m["ate.post_opt"] < m["ate.pre_opt"]
    assert m["loops.centroid_err_post"] < m["loops.centroid_err_pre"]


def test_batch_mode_also_improves(tmp_path):
    run(load_config(None, DRIFT + ["loop_mode=batch", f"output_dir={tmp_path}"]))
    m = metrics(tmp_path / "metrics.txt")
    assert m["ate.post_opt"] < m["ate.pre_opt"]


def test_sample_rate_three(tmp_path):
    man = run(load_config(None, DRIFT + ["sample_rate=3", f"output_dir={tmp_path}"]))
    assert man.n_chunks == expected_chunk_count(60, 12, 6, 3)
    assert man.n_frames == 20


def test_runs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run(load_config(None, DRIFT + [f"output_dir={out}"]))
    for name in ("metrics.txt", "report.txt", "map.bin", "graph.g2o", "loops.tsv",
                 "associations.tsv", "trajectory_est.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for d in sorted((a / "chunks").iterdir()):
        for f in sorted(d.iterdir()):
            assert f.read_bytes() == (b / "chunks" / d.name / f.name).read_bytes()


def test_cli_generate_and_run_from_dumps(tmp_path, capsys):
    gen = tmp_path / "gen"
    assert main(["gen-scene", "--seed", "7", "--out", str(gen), "--frames", "24"]) == 0
    again = tmp_path / "gen2"
    assert main(["gen-scene", "--seed", "7", "--out", str(again), "--frames", "24"]) == 0
    for f in sorted(gen.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (again / f.relative_to(gen)).read_bytes()
    out = tmp_path / "run"
    code = main(["run", "--set", f"input_chunks={gen}", "--set", f"input_gt={gen / 'trajectory_gt.txt'}",
                 "--set", "chunk_size=12", "--set", "chunk_overlap=6", "--out", str(out)])
    assert code == 0
    assert metrics(out / "metrics.txt")["ate.post_opt"] < 1e-6
    assert main(["cluster", "--chunk", str(gen / "chunk_0000")]) == 0
    assert main(["associate", str(gen / "chunk_0000"), str(gen / "chunk_0001"),
                 "--log", str(tmp_path / "aff.tsv")]) == 0
    assert (tmp_path / "aff.tsv").read_text().startswith("frame\tmask")
    capsys.readouterr()
    # a scaled copy of the reference aligns to zero error under similarity alignment
    scaled = tmp_path / "scaled.txt"
    rows = []
    for ln in (gen / "trajectory_gt.txt").read_text().splitlines():
        v = ln.split()
        rows.append(" ".join([v[0], *(repr(3.0 * float(x)) for x in v[1:4]), *v[4:]]))
    scaled.write_text("\n".join(rows) + "\n")
    assert main(["eval", "--est", str(scaled), "--ref", str(gen / "trajectory_gt.txt")]) == 0
    assert float(capsys.readouterr().out.strip().split("=")[1]) < 1e-9
    assert main(["eval", "--est", str(scaled), "--ref", str(gen / "trajectory_gt.txt"), "--align", "none"]) == 0
    assert float(capsys.readouterr().out.strip().split("=")[1]) > 0.1


def test_cli_optimize_and_losscheck(tmp_path, capsys):
    out = tmp_path / "run"
    run(load_config(None, DRIFT + [f"output_dir={out}"]))
    assert main(["optimize", "--graph", str(out / "graph.g2o"), "--out", str(tmp_path / "o.g2o")]) == 0
    assert "converged=True" in capsys.readouterr().out
    assert main(["losscheck", "--sets", "5"]) == 0


def test_cli_exit_codes(tmp_path):
    assert main([]) == 2
    assert main(["run", "--set", "chunk_size=abc"]) == 2
    assert main(["run", "--set", f"input_chunks={tmp_path / 'missing'}", "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "chunk_0000"
    bad.mkdir()
    (bad / "depth.bin").write_bytes(b"garbage")
    assert main(["cluster", "--chunk", str(bad)]) == 3
    (tmp_path / "g.g2o").write_text("WHAT 1 2\n")
    assert main(["optimize", "--graph", str(tmp_path / "g.g2o")]) == 3
    assert main(["losscheck", "--sets", "3", "--tol", "0"]) == 4
