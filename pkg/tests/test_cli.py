import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eprkit.cli import main, velocity_curve_rows
from eprkit.midi_io import read_midi, save_midi
from eprkit.synthetic import write_corpus

from conftest import seq

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_config_echo_precedes_work(capsys, tmp_path):
    code, _, err = run(capsys, "convert", DATA / "fixture.mid",
                       tmp_path / "x.csv")
    assert code == 0
    first = err.splitlines()[0]
    assert first.startswith("# resolved config: ")
    cfg = json.loads(first.split(": ", 1)[1])
    assert cfg["command"] == "convert" and "threads" in cfg


def test_convert_golden(capsys, tmp_path):
    out = tmp_path / "fixture.csv"
    assert run(capsys, "convert", DATA / "fixture.mid", out)[0] == 0
    assert out.read_bytes() == (DATA / "fixture.csv").read_bytes()


def test_convert_roundtrip(capsys, tmp_path):
    mid = tmp_path / "back.mid"
    assert run(capsys, "convert", DATA / "fixture.csv", mid)[0] == 0
    assert read_midi(mid).notes == read_midi(DATA / "fixture.mid").notes


def test_convert_bad_header(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c,d\n1,2,3,4\n")
    assert run(capsys, "convert", bad, tmp_path / "x.mid")[0] == 1


def test_convert_unknown_direction(capsys, tmp_path):
    assert run(capsys, "convert", tmp_path / "x.txt", tmp_path / "y")[0] == 2


def test_missing_file_is_io_error(capsys, tmp_path):
    assert run(capsys, "convert", tmp_path / "nope.mid",
               tmp_path / "y.csv")[0] == 3


def test_corrupt_midi_is_io_error(capsys, tmp_path):
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"MThd\x00\x00")
    assert run(capsys, "align", bad, bad)[0] == 3


def twenty(tmp_path):
    a = seq(np.arange(20) * 0.5)
    save_midi(a, tmp_path / "a.mid")
    save_midi(a.subset([k for k in range(20) if k != 10]), tmp_path / "b.mid")
    return tmp_path / "a.mid", tmp_path / "b.mid"


def test_align_identical(capsys, tmp_path):
    a, _ = twenty(tmp_path)
    code, out, _ = run(capsys, "align", a, a)
    assert code == 0
    assert out.strip() == "keep=true unmatched=0.000 pitch_mismatch=0.000"


def test_align_one_deleted(capsys, tmp_path):
    a, b = twenty(tmp_path)
    code, out, _ = run(capsys, "align", a, b, "--out", tmp_path / "s.txt")
    assert code == 0
    assert out.strip() == "keep=true unmatched=0.050 pitch_mismatch=0.000"
    assert "# unmatched_a: 10" in (tmp_path / "s.txt").read_text()


def test_align_discard_exit_code(capsys, tmp_path):
    a, b = twenty(tmp_path)
    code, out, _ = run(capsys, "align", a, b, "--unmatched-max", "0.04")
    assert code == 1
    assert out.startswith("keep=false")


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["align"])
    assert exc.value.code == 2
    capsys.readouterr()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, n_compositions=10, n_performances=(2, 2), seed=5,
                 n_notes=(30, 40))
    return root


def test_dataset_build_is_deterministic(capsys, corpus, tmp_path):
    for name in ("one", "two"):
        code, out, _ = run(capsys, "dataset", "build", "--root", corpus,
                           "--out", tmp_path / name, "--seed", 3)
        assert code == 0
        assert out.splitlines()[0].split()[:2] == ["Split", "Composers"]
    assert (tmp_path / "one" / "manifest.json").read_bytes() == \
        (tmp_path / "two" / "manifest.json").read_bytes()


def test_gem_eval_self(capsys, corpus, tmp_path):
    # each composition's first performance doubles as its rendition
    rend = tmp_path / "rend"
    for comp in sorted(p for p in corpus.iterdir() if p.is_dir()):
        (rend / comp.name).mkdir(parents=True)
        shutil.copy(comp / "perf_00.mid", rend / comp.name / "rendition.mid")
    refs = tmp_path / "refs"
    for comp in sorted(p for p in corpus.iterdir() if p.is_dir()):
        (refs / comp.name).mkdir(parents=True)
        shutil.copy(comp / "perf_00.mid", refs / comp.name / "perf_00.mid")
    code, out, _ = run(capsys, "gem", "eval", "--renditions", rend,
                       "--references", refs, "--json", tmp_path / "r.json")
    assert code == 0
    header, row = out.splitlines()
    assert row.split()[1:4] == ["0.0000", "0.0000", "0.0000"]
    assert row.split()[-1] == "100.00"
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["n_compositions"] == 10


def test_gem_eval_surrogate(capsys, corpus):
    code, out, _ = run(capsys, "gem", "eval", "--surrogate-human",
                       "--references", corpus)
    assert code == 0
    assert out.splitlines()[1].split()[0] == "Human"


def test_gem_eval_needs_renditions(capsys, corpus):
    assert run(capsys, "gem", "eval", "--references", corpus)[0] == 2


def test_velocity_curve_golden(capsys, tmp_path):
    out = tmp_path / "v.csv"
    with pytest.warns(UserWarning, match="padding"):
        code, _, _ = run(capsys, "velocity-curve", DATA / "fixture.mid",
                         DATA / "fixture_b.mid", "--n-notes", 4, "--out", out)
    assert code == 0
    assert out.read_bytes() == (DATA / "velocity_curve.csv").read_bytes()


def test_velocity_curve_single_note(capsys):
    code, out, _ = run(capsys, "velocity-curve", DATA / "fixture.mid",
                       "--n-notes", 1)
    assert code == 0
    assert out == "note,fixture\r\n1,80\r\n"


def test_velocity_curve_rejects_zero():
    with pytest.raises(ValueError):
        velocity_curve_rows([], [], 0)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "eprkit", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("eprkit ")
