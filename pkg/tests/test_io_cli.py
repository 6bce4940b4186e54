import filecmp
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from autolabel3d import io as dio
from autolabel3d.cli import main
from autolabel3d.config import PipelineConfig, format_config, load_config
from autolabel3d.frame import Frame
from autolabel3d.geometry import Box7, Pose
from autolabel3d.semantics import TextQuery
from autolabel3d.tracking import LabeledBox

GOLDEN = Path(__file__).parent / "golden" / "golden_mini_report.json"


def random_frame(seed=0, n=257, d=16):
    rng = np.random.default_rng(seed)
    return Frame(
        index=0,
        timestamp=0.0,
        points=rng.normal(size=(n, 3)).astype(np.float32),
        ego_pose=Pose.from_yaw(0.3, (1.0, 2.0, 1.8)),
        embeddings=rng.normal(size=(n, d)).astype(np.float32),
        flow=rng.normal(size=(n, 3)).astype(np.float32),
        extras={"instance": rng.integers(-1, 4, n).astype(np.int32), "gt_flow": rng.normal(size=(n, 3)).astype(np.float32)},
    )


@pytest.fixture
def saved(tmp_path):
    m = dio.new_manifest(tmp_path / "ds", 0.1)
    f = random_frame()
    dio.save_frame(m, f)
    m.write()
    return m, f


def test_frame_round_trip_bit_identical(saved):
    m, f = saved
    g = dio.load_frame(dio.load_manifest(m.root), 0)
    for name in ("points", "embeddings", "flow"):
        assert getattr(g, name).tobytes() == getattr(f, name).tobytes()
    for k in f.extras:
        assert g.extras[k].tobytes() == f.extras[k].tobytes()
    assert np.array_equal(g.ego_pose.as_matrix(), f.ego_pose.as_matrix())


def test_points_little_endian_row_major(saved):
    m, f = saved
    raw = (m.root / m.frames[0]["points"]).read_bytes()
    assert raw == f.points.astype("<f4").tobytes(order="C")
    assert len(raw) == f.num_points * 3 * 4


def test_truncated_file_names_the_file(saved):
    m, _ = saved
    path = m.root / m.frames[0]["points"]
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(dio.DatasetFormatError, match="000000.points.f32"):
        dio.load_frame(dio.load_manifest(m.root), 0)


def test_version_mismatch(saved):
    m, _ = saved
    doc = json.loads(m.path.read_text())
    doc["version"] += 1
    m.path.write_text(json.dumps(doc))
    with pytest.raises(dio.DatasetFormatError, match="version"):
        dio.load_manifest(m.root)


def test_missing_manifest(tmp_path):
    with pytest.raises(dio.DatasetFormatError):
        dio.load_manifest(tmp_path)


def test_labels_round_trip(tmp_path):
    labels = [
        LabeledBox(Box7(1.25, -2.5, 0.75, 4.5, 1.9, 1.6, 0.125), 3, 0, 0.5, "vehicle"),
        LabeledBox(Box7(0, 0, 0.9, 0.8, 0.6, 1.8, -1.0), 4, 1, 1.0, None),
    ]
    path = tmp_path / "l.txt"
    dio.write_labels(path, labels)
    assert dio.read_labels(path) == labels
    path.write_text(path.read_text() + "1 2 3\n")
    with pytest.raises(dio.DatasetFormatError, match=":5:"):
        dio.read_labels(path)


def test_queries_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    qs = [TextQuery("vehicle", ("car", "sedan"), rng.normal(size=(2, 8)).astype(np.float32)),
          TextQuery("vru", ("person",), rng.normal(size=(1, 8)).astype(np.float32))]
    path = tmp_path / "q.jsonl"
    dio.write_queries(path, qs)
    back = dio.read_queries(path)
    assert [q.category_name for q in back] == ["vehicle", "vru"]
    assert back[0].prompts == ("car", "sedan")
    assert np.array_equal(back[0].embeddings, qs[0].embeddings)


# CLI


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def golden_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("golden") / "ds"
    assert run("synth", "--preset", "golden-mini", "--seed", 7, "--out", root) == 0
    return root


def golden_report(root, work):
    labels, cats, report = work / "labels.txt", work / "cats.txt", work / "report.json"
    assert run("autolabel", root, "--out", labels, "--eps-sf", 0) == 0
    assert run("query", labels, root, "--out", cats) == 0
    assert run("eval", cats, root, "--json", report) == 0
    return report


def test_golden_report_matches(golden_ds, tmp_path, capsys):
    report = golden_report(golden_ds, tmp_path)
    assert report.read_bytes() == GOLDEN.read_bytes()
    doc = json.loads(report.read_text())
    assert set(doc["ap"]) == {"0.40", "0.50"}
    out = capsys.readouterr().out
    assert "0.40" in out and "0.50" in out


def test_gt_against_itself(golden_ds, tmp_path):
    report = tmp_path / "r.json"
    assert run("eval", golden_ds / "gt_boxes.txt", golden_ds, "--json", report) == 0
    doc = json.loads(report.read_text())
    for per_cat in doc["ap"].values():
        assert all(v == 1.0 for v in per_cat.values())
    assert doc["mot"]["mota"] == 100.0 and doc["mot"]["motp"] == 0.0


def test_inspect(golden_ds, capsys):
    assert run("inspect", golden_ds, "--frames") == 0
    out = capsys.readouterr().out
    assert "frames       6" in out and "extras=gt_flow,instance,semantic" in out


def test_empty_scene_gives_empty_labels(tmp_path):
    root = tmp_path / "empty"
    assert run("synth", "--preset", "empty", "--out", root) == 0
    out = tmp_path / "labels.txt"
    assert run("autolabel", root, "--out", out) == 0
    assert dio.read_labels(out) == []


def test_errors_exit_nonzero(tmp_path, capsys):
    assert run("inspect", tmp_path / "missing") == 1
    assert "error" in capsys.readouterr().err
    assert run("synth", "--preset", "nope", "--out", tmp_path / "x") == 1
    with pytest.raises(SystemExit) as exc:
        run("autolabel")
    assert exc.value.code != 0


def test_autolabel_without_embeddings_needs_filter_off(tmp_path, capsys):
    m = dio.new_manifest(tmp_path / "ds", 0.1)
    f = random_frame()
    dio.save_frame(m, Frame(0, 0.0, f.points))
    m.write()
    assert run("autolabel", m.root, "--out", tmp_path / "l.txt", "--background-queries", tmp_path / "none.jsonl") == 1
    assert run("autolabel", m.root, "--out", tmp_path / "l.txt", "--background-filter", "false") == 0


def test_query_dimension_mismatch(golden_ds, tmp_path, capsys):
    qs = tmp_path / "q.jsonl"
    dio.write_queries(qs, [TextQuery("vehicle", ("car",), np.ones((1, 5), np.float32))])
    labels = tmp_path / "l.txt"
    dio.write_labels(labels, [LabeledBox(Box7(0, 0, 0, 1, 1, 1, 0), 0, 0, 1.0)])
    assert run("query", labels, golden_ds, "--queries", qs, "--out", tmp_path / "o.txt") == 1
    assert "dim" in capsys.readouterr().err


def test_eval_frame_misalignment(golden_ds, tmp_path, capsys):
    labels = tmp_path / "l.txt"
    dio.write_labels(labels, [LabeledBox(Box7(0, 0, 0, 1, 1, 1, 0), 0, 99, 1.0)])
    assert run("eval", labels, golden_ds) == 1
    assert "99" in capsys.readouterr().err


def test_config_flag_overrides(capsys):
    assert run("config", "--eps-sf", "0.5", "--nms-mode", "3d") == 0
    text = capsys.readouterr().out
    assert "eps_sf = 0.5" in text and "nms_mode = 3d" in text
    assert run("config", "--eps-sf", "-1") == 1


def test_config_file(tmp_path, capsys):
    path = tmp_path / "c.ini"
    path.write_text(format_config(PipelineConfig(r_bg=0.5)))
    assert load_config(path).r_bg == 0.5
    assert run("config", "--config", path) == 0
    assert "r_bg = 0.5" in capsys.readouterr().out
    path.write_text("[autolabel]\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        load_config(path)


def test_shipped_config_is_default():
    assert load_config() == PipelineConfig()


# determinism


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_synth_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--preset", "golden-mini", "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_flow_and_autolabel_identical_across_workers(golden_ds, tmp_path):
    outs = []
    for workers in (1, 3, 1):
        root = tmp_path / f"ds{len(outs)}"
        shutil.copytree(golden_ds, root)
        assert run("flow", root, "--workers", workers) == 0
        labels = tmp_path / f"l{len(outs)}.txt"
        assert run("autolabel", root, "--out", labels, "--workers", workers, "--eps-sf", 0) == 0
        outs.append((tree_bytes(root), labels.read_bytes()))
    assert outs[0] == outs[1] == outs[2]


def test_autolabel_sidecar(golden_ds, tmp_path):
    labels = tmp_path / "l.txt"
    assert run("autolabel", golden_ds, "--out", labels, "--eps-sf", 0) == 0
    doc = json.loads((tmp_path / "l.txt.tracks.json").read_text())
    ids = {lab.track_id for lab in dio.read_labels(labels)}
    assert {t["id"] for t in doc["tracks"]} == ids
    assert len(doc["features"]) == 6 and all(doc["features"])
    again = tmp_path / "m.txt"
    assert run("autolabel", golden_ds, "--out", again, "--eps-sf", 0, "--workers", 2) == 0
    assert filecmp.cmp(labels, again, shallow=False)
