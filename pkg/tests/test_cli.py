import numpy as np
import pytest

from hrvkit.cli import run
from hrvkit.core import loads_hrv, loads_raw

VOCAB = "Color\tred,blue\nPlants\ttree,oak tree#2\nAnimals\tcat,dog\n"
PLANT = ["--plant", "Color=0.0,0.1", "--plant", "Plants=1.0"]


@pytest.fixture
def files(tmp_path):
    (tmp_path / "vocab.tsv").write_text(VOCAB)
    (tmp_path / "prompts.txt").write_text("a red tree\na photo\toak tree#2\nthe blue cat\n")
    return tmp_path


def _common(d):
    return ["--vocab", str(d / "vocab.tsv"), *PLANT, "--seed", "3"]


def _build(d, *extra):
    out = d / "x.hrv"
    code = run(["build", *_common(d), "--prompts", str(d / "prompts.txt"), "--out", str(out), *extra])
    assert code == 0
    return out


def test_build_and_info(files, capsys):
    out = _build(files)
    hrv = loads_hrv(out.read_text())
    assert hrv.names == ["Color", "Plants", "Animals"] and hrv.H == 12
    assert run(["info", "--hrv", str(out)]) == 0
    assert "Color" in capsys.readouterr().out


def test_trace_replay_matches_online(files):
    online = _build(files, "--write-traces", str(files / "tr"))
    replay = files / "replay.hrv"
    assert run(["build", *_common(files), "--trace", str(files / "tr"), "--out", str(replay)]) == 0
    assert online.read_bytes() == replay.read_bytes()


def test_per_timestep_dump(files):
    raw_path = files / "raw.txt"
    _build(files, "--per-timestep", str(raw_path))
    raw = loads_raw(raw_path.read_text())
    assert np.all(raw.counts.sum(axis=0) == 3)
    assert run(["timesteps", "--raw", str(raw_path), "--out-dir", str(files / "ts")]) == 0
    assert any((files / "ts").iterdir())


def test_order_and_area(files, capsys):
    out = _build(files)
    assert run(["order", "--hrv", str(out), "--concept", "Color"]) == 0
    rows = [l.split("\t") for l in capsys.readouterr().out.splitlines()[2:]]
    # heads are 1-based flat indices; Color was planted on the first two
    assert {rows[0][1], rows[1][1]} == {"1", "2"}
    area = files / "area.tsv"
    assert run(["area", *_common(files), "--hrv", str(out), "--concept", "Color",
                "--ks", "0,6,12", "--out", str(area)]) == 0
    assert area.read_text().startswith("# seed=3")


def test_steer_and_edit(files):
    out = _build(files)
    assert run(["steer", *_common(files), "--hrv", str(out), "--mode", "adjust", "--desired", "Color",
                "--undesired", "Plants", "--token", "red", "--prompt", "a red tree",
                "--out", str(files / "s.tsv")]) == 0
    assert run(["edit", *_common(files), "--source-prompt", "a red tree", "--target-prompt",
                "a blue tree", "--edited-token", "blue", "--hrv", str(out), "--concept", "Color",
                "--out", str(files / "e.tsv")]) == 0


def test_stats_from_traces(files):
    _build(files, "--write-traces", str(files / "tr"))
    assert run(["stats", "--trace", str(files / "tr"), "--out", str(files / "st.tsv")]) == 0
    lines = [l for l in (files / "st.tsv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + 12


@pytest.mark.parametrize("argv,code", [
    (["order", "--hrv", "{d}/x.hrv", "--concept", "Colour"], 2),
    (["info", "--hrv", "{d}/prompts.txt"], 3),
    (["info", "--hrv", "{d}/missing.hrv"], 3),
    (["edit", "--vocab", "{d}/vocab.tsv", "--source-prompt", "a red tree", "--target-prompt",
      "a blue", "--edited-token", "blue"], 2),
    (["build", "--vocab", "{d}/vocab.tsv", "--plant", "Color=9.9", "--out", "{d}/y.hrv"], 2),
    (["nonsense"], 2),
])
def test_exit_codes(files, argv, code):
    _build(files)
    assert run([a.format(d=files) for a in argv]) == code


def test_edit_rejects_misaligned_prompt_is_alignment_error(files, capsys):
    code = run(["edit", "--vocab", str(files / "vocab.tsv"), "--source-prompt", "a red tree",
                "--target-prompt", "a oak tree#2 tree", "--edited-token", "oak tree", "--seed", "1"])
    assert code == 2
    assert "differ" in capsys.readouterr().err


def test_prompt_overflow_names_file_and_line(files, capsys):
    bad = files / "long.txt"
    bad.write_text("the cat\na b c d e f g\n")
    code = run(["build", "--vocab", str(files / "vocab.tsv"), "--seed", "1", "--prompts", str(bad),
                "--out", str(files / "z.hrv"), "--write-traces", str(files / "none")])
    assert code == 3
    assert "long.txt: prompt 2" in capsys.readouterr().err
    assert not (files / "none").exists()
