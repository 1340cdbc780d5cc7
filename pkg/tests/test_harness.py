import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from ctxpose.checkpoint import read_manifest
from ctxpose.geometry import DESK_CAMERA, Pose, UnitQuaternion
from ctxpose.harness import (
    GT_COLOR,
    PRED_COLOR,
    RunConfig,
    cmd_eval,
    cmd_report,
    evaluate_frames,
    main,
    overlay_image,
    overlay_pixels,
    read_report_csv,
    records_for,
    train_run,
)
from ctxpose.checkpoint import load_checkpoint
from ctxpose.estimator import estimate, observe, route
from ctxpose.scenegen import DatasetManifest

from test_estimator import SMALL
from test_refiner import RCFG
from test_scenegen import _tree_digest

SCENE = {"n_train": 6, "n_test": 3, "n_surface_points": 1500}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness") / "data" / "nested"
    assert main(["gen-data", "--out", str(root), "--seed", "2", "--config", str(_config_file(root.parent.parent))]) == 0
    return root


def _config_file(where):
    path = where / "gen.json"
    path.write_text(json.dumps({"scene": SCENE}))
    return path


def _run(tmp_path, dataset, margin=RCFG.curriculum_margin, epochs=2, **kw) -> RunConfig:
    return RunConfig(dataset=str(dataset), out=str(tmp_path / "run"), seed=3, epochs=epochs, iterations=(0, 1, 2),
                     estimator=SMALL, refiner=dataclasses.replace(RCFG, curriculum_margin=margin), **kw)


def _log(run):
    with open(f"{run.out}/train_log.jsonl") as fh:
        return [json.loads(line) for line in fh]


def test_gen_data_is_deterministic(dataset, tmp_path):
    again = tmp_path / "again"
    main(["gen-data", "--out", str(again), "--seed", "2", "--config", str(_config_file(tmp_path))])
    assert _tree_digest(again) == _tree_digest(dataset)
    assert len(DatasetManifest.load(dataset).split("test")) == 3


def test_run_config_round_trip_and_validation():
    run = RunConfig(estimator=SMALL, refiner=RCFG, iterations=(0, 3))
    assert RunConfig.from_dict(json.loads(json.dumps(run.to_dict()))) == run
    assert RunConfig.from_dict({"estimator": {"hidden": 64}}).estimator.hidden == 64
    assert run.hash() == dataclasses.replace(run, out="elsewhere").hash()
    assert run.hash() != dataclasses.replace(run, seed=1).hash()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(threshold="pct:3")
    with pytest.raises(ValueError):
        RunConfig(iterations=(0, -2))


def test_gate_never_opens_with_zero_margin(tmp_path, dataset):
    run = _run(tmp_path, dataset, margin=0.0)
    ck = train_run(run)
    entries = _log(run)
    assert [e["epoch"] for e in entries] == [1, 2]
    assert not any("refiner" in e or e["gate_open"] for e in entries)
    assert ck.gate.opened_at is None
    assert all(e["seed"] == 3 and e["config_hash"] == run.hash() for e in entries)


def test_gate_opens_at_first_epoch_with_infinite_margin(tmp_path, dataset):
    run = _run(tmp_path, dataset, margin=float("inf"))
    ck = train_run(run)
    entries = _log(run)
    assert ck.gate.opened_at == 1
    assert all("refiner" in e and e["gate_epoch"] == 1 for e in entries)
    assert entries[-1]["step"] > entries[0]["step"]


def test_resume_continues_the_same_schedule(tmp_path, dataset):
    full = _run(tmp_path / "a", dataset, margin=float("inf"))
    train_run(full)
    part = _run(tmp_path / "b", dataset, margin=float("inf"))
    first = train_run(part, max_epochs=1)
    assert first.epoch == 1
    assert read_manifest(f"{part.out}/checkpoints/last")["epoch"] == 1
    done = train_run(part, resume=f"{part.out}/checkpoints/last")
    assert done.epoch == 2 and done.step == load_checkpoint(f"{full.out}/checkpoints/last").step
    strip = lambda es: [{k: v for k, v in e.items() if k != "seconds"} for e in es]
    assert strip(_log(part)) == strip(_log(full))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    tmp = tmp_path_factory.mktemp("trained")
    run = _run(tmp, dataset, margin=float("inf"), epochs=1)
    train_run(run)
    return run


def test_eval_writes_reports_and_is_repeatable(trained):
    reports = cmd_eval(trained)
    assert set(reports) == {0, 1, 2}
    out = trained.out
    for k in (0, 1, 2):
        rows = read_report_csv(f"{out}/report_K{k}.csv")
        assert [r.object for r in rows][-1] == "MEAN"
        assert abs(rows[-1].accuracy_percent - np.mean([r.accuracy_percent for r in rows[:-1]])) < 1e-9
        with open(f"{out}/report_K{k}.csv") as fh:
            assert fh.readline().startswith(f"# seed=3 config_hash={trained.hash()} K={k}")
    first = {k: json.loads(open(f"{out}/records_K{k}.json").read())["records"] for k in (0, 2)}
    cmd_eval(trained)
    for k in (0, 2):
        again = json.loads(open(f"{out}/records_K{k}.json").read())["records"]
        assert [(r["add"], r["adds"], r["pred_pose"]) for r in again] == [
            (r["add"], r["adds"], r["pred_pose"]) for r in first[k]]


def test_k0_is_estimator_only(trained):
    man = DatasetManifest.load(trained.dataset)
    ck = load_checkpoint(f"{trained.out}/checkpoints/last")
    results = evaluate_frames(man, ck.estimator, ck.refiner, [0, 2], seed=trained.seed)
    entries = man.split("test")
    for r in results[:3]:
        i = next(j for j, e in enumerate(entries) if e.frame_id == r.frame_id)
        frame = man.load_frame(entries[i])
        obs = observe(frame, r.object_id)
        pose, _, _ = estimate(ck.estimator, obs, route(man.models[r.object_id]),
                              np.random.default_rng([trained.seed, i, r.object_id]))
        assert np.allclose(r.poses[0].homogeneous(), pose.homogeneous())
        assert r.seconds[2] >= r.seconds[0]
    recs = records_for(results, man, 2)
    assert all(rec.refinement_iterations == 2 for rec in recs)


def test_report_command_and_overlays(trained):
    cmd_eval(trained)
    run = dataclasses.replace(trained, overlay=True)
    text = cmd_report(run)
    assert "K=0" in text and "K=2" in text and "MEAN" in text and "0.065" in text
    overlays = sorted((Path(trained.out) / "overlay").glob("*.png"))
    assert len(overlays) == len(DatasetManifest.load(trained.dataset).split("test"))


def test_report_missing_eval(tmp_path):
    with pytest.raises(FileNotFoundError, match="K=0"):
        cmd_report(RunConfig(out=str(tmp_path)))


def test_overlay_coincides_when_pred_equals_gt(blob):
    pose = Pose(UnitQuaternion.from_axis_angle([1, 1, 0], 0.7), (0.01, -0.02, 0.6))
    img = overlay_image(np.zeros((120, 160, 3), np.uint8), blob.points, pose, pose, DESK_CAMERA)
    drawn = {tuple(p) for p in np.argwhere(img.any(axis=2))}
    assert drawn == overlay_pixels(blob.points, pose, DESK_CAMERA)
    assert np.all(img[img.any(axis=2)] == PRED_COLOR)
    shifted = Pose(pose.rotation, tuple(pose.t + [0.05, 0, 0]))
    img2 = overlay_image(np.zeros((120, 160, 3), np.uint8), blob.points, pose, shifted, DESK_CAMERA)
    assert np.any(np.all(img2 == GT_COLOR, axis=2))


def test_cli_train_eval_report(tmp_path, dataset, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"estimator": SMALL.to_dict(), "refiner": RCFG.to_dict()}))
    common = ["--config", str(cfg), "--dataset", str(dataset), "--out", str(tmp_path / "r"), "--seed", "1"]
    assert main(["train", *common, "--epochs", "1"]) == 0
    assert main(["eval", *common, "--iterations", "0,2"]) == 0
    assert main(["report", *common, "--iterations", "0,2"]) == 0
    out = capsys.readouterr().out
    assert "K=0: mean accuracy" in out and "K=2" in out
    assert (tmp_path / "r" / "report.txt").exists()
