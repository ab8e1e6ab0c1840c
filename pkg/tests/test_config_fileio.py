import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from toa_tomo import fileio
from toa_tomo.config import DESK, RunConfig, desk_config, load_config, parse_config_text
from toa_tomo.errors import SpecError
from toa_tomo.recon import ResolutionStage


def test_default_stages():
    cfg = RunConfig()
    assert [(s.dx, s.tau, s.start_iteration) for s in cfg.stages] == [
        (0.018, 60e-12, 1), (0.009, 30e-12, 201), (0.003, 10e-12, 901)]
    assert cfg.subset_count == 10 and cfg.ring_count == 300 and cfg.clamp == 1e-9


def test_text_roundtrip():
    for cfg in (RunConfig(), desk_config(), desk_config(seed=7, lam=0.5)):
        again = load_config(None, parse_config_text(cfg.to_text()))
        assert again == cfg
        assert again.hash() == cfg.hash()


def test_hash_ignores_bookkeeping_keys():
    a = desk_config()
    assert a.hash() == desk_config(workers=4, out="elsewhere", checkpoint_every=3).hash()
    assert a.hash() != desk_config(seed=2).hash()
    assert a.hash() != desk_config(lam=0.3).hash()
    assert len(a.hash()) == 64


def test_desk_values():
    cfg = desk_config()
    assert cfg.ring_count == 16 and cfg.subset_count == 4 and cfg.iterations == 60
    assert cfg.area == (0.25, 0.25)
    assert [s.dx for s in cfg.stages] == [0.009, 0.0045]
    assert set(DESK) <= {f for f in RunConfig.__dataclass_fields__}


def test_desk_file_matches(tmp_path):
    from pathlib import Path
    cfg_file = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
    assert load_config(cfg_file) == desk_config()


@pytest.mark.parametrize("values", [{"nope": "1"}, {"lam": "x"}, {"lam": "-1"}, {"stages": ""},
                                    {"stages": "0.009:30e-12:1, 0.0045:40e-12:11"}, {"area": "1"},
                                    {"batch_size": "300"}, {"ring_count": "0"}])
def test_bad_config(values):
    with pytest.raises(SpecError):
        load_config(None, values)


def test_parse_comments_and_errors():
    assert parse_config_text("# c\nseed = 3  # tail\n\n") == {"seed": "3"}
    with pytest.raises(SpecError):
        parse_config_text("seed 3\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(SpecError):
        load_config(tmp_path / "none.cfg")


def test_stage_text_format():
    cfg = RunConfig().with_overrides({"stages": "0.02:50e-12:1"})
    assert cfg.stages == (ResolutionStage(0.02, 50e-12, 1),)


# file formats -----------------------------------------------------------------

@given(hnp.arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(0, 1e-6, allow_subnormal=False)),
       st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_projection_roundtrip(tmp_path_factory, arrival, seed):
    d = tmp_path_factory.mktemp("proj")
    valid = np.random.default_rng(seed).random(arrival.shape) > 0.3
    fileio.write_projection_csv(d / "p.csv", arrival, valid, "h")
    fileio.write_projection_bin(d / "p.bin", arrival, valid)
    for a, v in (fileio.read_projection_csv(d / "p.csv"), fileio.read_projection_bin(d / "p.bin")):
        assert np.array_equal(a, arrival) and np.array_equal(v, valid)


def test_projection_bin_header(tmp_path):
    fileio.write_projection_bin(tmp_path / "p.bin", np.zeros((2, 3)), np.ones((2, 3), bool))
    data = (tmp_path / "p.bin").read_bytes()
    assert data[:8] == b"TOAPROJ\0" and data[8] == 1
    assert len(data) == 17 + 2 * 3 * 9
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError):
        fileio.read_projection_bin(tmp_path / "bad.bin")


def test_grid_csv_roundtrip(tmp_path):
    g = np.random.default_rng(0).uniform(1, 60, (5, 7))
    fileio.write_grid_csv(tmp_path / "g.csv", g, "abc")
    assert (tmp_path / "g.csv").read_text().startswith("# config_hash=abc\n")
    assert np.array_equal(fileio.read_grid_csv(tmp_path / "g.csv"), g)


def test_table_roundtrip(tmp_path):
    fileio.write_table(tmp_path / "t.csv", ["a", "b"], [(1, 0.1), (2, float("nan"))], "h1")
    header, rows, h = fileio.read_table(tmp_path / "t.csv")
    assert header == ["a", "b"] and rows == [["1", "0.1"], ["2", "nan"]] and h == "h1"


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12.0).reshape(3, 4)
    fileio.write_pgm(tmp_path / "a.pgm", img)
    px = fileio.read_pgm(tmp_path / "a.pgm")
    assert px.shape == (3, 4) and px[0, 0] == 0 and px[-1, -1] == 255
    fileio.write_pgm(tmp_path / "b.pgm", img, flip=True)
    assert np.array_equal(fileio.read_pgm(tmp_path / "b.pgm"), px[::-1])


def test_trace_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    samples = [rng.random((4, 30)) for _ in range(3)]
    fileio.write_trace_archive(tmp_path / "t.npz", samples, 1e-11, 2.5e-10, "hh")
    s, tau, tref, h = fileio.read_trace_archive(tmp_path / "t.npz")
    assert all(np.array_equal(a, b) for a, b in zip(s, samples))
    assert (tau, tref, h) == (1e-11, 2.5e-10, "hh")


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"x": np.arange(6.0).reshape(2, 3), "s": np.str_('{"a": 1}')}
    fileio.write_checkpoint(tmp_path / "c.bin", "f" * 64, arrays)
    data = (tmp_path / "c.bin").read_bytes()
    assert data[:8] == b"TOACKPT\0" and data[8] == 1
    h, back = fileio.read_checkpoint(tmp_path / "c.bin")
    assert h == "f" * 64 and np.array_equal(back["x"], arrays["x"]) and str(back["s"]) == '{"a": 1}'
    assert not (tmp_path / "c.bin.tmp").exists()
    (tmp_path / "bad.bin").write_bytes(b"garbage" * 20)
    with pytest.raises(ValueError):
        fileio.read_checkpoint(tmp_path / "bad.bin")


def test_fmt():
    assert fileio.fmt(0.1) == "0.1" and fileio.fmt(True) == "1" and fileio.fmt(np.float64(1e-10)) == "1e-10"
