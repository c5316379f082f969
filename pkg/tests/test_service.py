import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gazedistill.service.app import app

client = TestClient(app)

SMALL_OVERRIDES = {
    "scene.image_side": "32",
    "scene.radius_min": "4",
    "scene.radius_max": "7",
    "scene.count": "8",
    "scene.gaze_points": "25",
    "train.epochs": "1",
    "train.batch_size": "4",
    "model.base_channels": "8",
    "model.student_channels": "4",
    "model.heads": "2",
    "text.width": "32",
}

VALID_REPORT = {
    "location": "upper left",
    "boundary": "clear",
    "characteristics": ["smooth"],
    "area_percent": 12.5,
    "confidence": "high",
    "remarks": "",
}


def synth_payload(tmp_path, seed="1234"):
    return {
        "overrides": {**SMALL_OVERRIDES, "scene.seed": seed, "run.root": str(tmp_path / "runs")},
        "out_dir": str(tmp_path / f"ds-{seed}"),
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("svc")
    response = client.post("/synth", json=synth_payload(tmp))
    assert response.status_code == 200, response.text
    return tmp, response.json()


def test_health():
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["name"] == "gazedistill"


def test_synth_deterministic(dataset, tmp_path):
    tmp, first = dataset
    again = client.post("/synth", json={
        "overrides": {**SMALL_OVERRIDES, "scene.seed": "1234", "run.root": str(tmp_path / "runs")},
        "out_dir": str(tmp_path / "ds2"),
    }).json()
    assert again["manifest_sha256"] == first["manifest_sha256"]
    assert again["count"] == 8


def test_unknown_config_key_is_400_with_key(tmp_path):
    response = client.post("/synth", json={"overrides": {"scene.quack": "1"}})
    assert response.status_code == 400
    body = response.json()
    assert body["kind"] == "config"
    assert body["key"] == "scene.quack"


def test_masks_endpoint(dataset):
    tmp, synth = dataset
    response = client.post("/masks", json={
        "overrides": {**SMALL_OVERRIDES, "run.root": str(tmp / "runs")},
        "dataset_dir": synth["dataset_dir"],
        "out_dir": str(tmp / "pm"),
    })
    assert response.status_code == 200, response.text
    body = response.json()
    assert body["count"] == 8
    from gazedistill.gaze import load_mask_png

    hc = load_mask_png(tmp / "pm" / "hc" / "0000.png")
    bc = load_mask_png(tmp / "pm" / "bc" / "0000.png")
    assert not (hc & ~bc).any()


def test_prompt_endpoint():
    body = client.get("/report/prompt").json()
    assert "Area Percentage" in body["prompt"]


def test_validate_endpoint_accepts_and_rejects():
    good = client.post("/report/validate", json={"raw_text": json.dumps(VALID_REPORT)})
    assert good.status_code == 200
    body = good.json()
    assert body["report"]["location"] == "upper_left"
    assert body["canonical_text"].startswith("location: upper_left;")

    bad = client.post("/report/validate", json={
        "raw_text": json.dumps({**VALID_REPORT, "location": "center"})
    })
    assert bad.status_code == 400
    assert bad.json()["kind"] == "ReportVocabularyError"


def test_report_fetch_replay(dataset, tmp_path):
    tmp, synth = dataset
    image_path = f"{synth['dataset_dir']}/images/0000.png"
    fixtures = tmp_path / "fixtures"
    from gazedistill.reports import VLMClient

    recorder = VLMClient(mode="replay", fixture_dir=fixtures)
    recorder.save_fixture(open(image_path, "rb").read(), json.dumps(VALID_REPORT))

    hit = client.post("/report/fetch", json={
        "overrides": {"report.fixture_dir": str(fixtures)},
        "image_path": image_path,
    })
    assert hit.status_code == 200, hit.text
    assert hit.json()["report"]["boundary"] == "clear"

    miss = client.post("/report/fetch", json={
        "overrides": {"report.fixture_dir": str(fixtures)},
        "image_path": f"{synth['dataset_dir']}/images/0001.png",
    })
    assert miss.status_code == 404
    assert miss.json()["kind"] == "fixture_missing"


def test_train_eval_cycle(dataset):
    tmp, synth = dataset
    overrides = {**SMALL_OVERRIDES, "run.root": str(tmp / "runs")}
    teacher = client.post("/train/teacher", json={
        "overrides": overrides,
        "dataset_dir": synth["dataset_dir"],
        "run_dir": str(tmp / "teacher-run"),
    })
    assert teacher.status_code == 200, teacher.text
    t_body = teacher.json()
    assert t_body["stage"] == "teacher"
    assert len(t_body["records"]) == 1

    student = client.post("/train/student", json={
        "overrides": overrides,
        "dataset_dir": synth["dataset_dir"],
        "teacher_checkpoint": t_body["checkpoints"]["final"],
        "run_dir": str(tmp / "student-run"),
    })
    assert student.status_code == 200, student.text
    s_body = student.json()

    out_path = str(tmp / "eval.json")
    evaluated = client.post("/eval", json={
        "overrides": overrides,
        "dataset_dir": synth["dataset_dir"],
        "checkpoint": s_body["checkpoints"]["final"],
        "split": "test",
        "out_path": out_path,
    })
    assert evaluated.status_code == 200, evaluated.text
    body = evaluated.json()
    assert body["role"] == "student"
    assert body["report_path"] == out_path
    saved = json.loads(open(out_path).read())
    assert saved["aggregate"]["dice"]["n"] >= 1


def test_eval_shape_mismatch_is_400_naming_files(dataset, tmp_path):
    import shutil

    from gazedistill.gaze import save_mask_png

    tmp, synth = dataset
    broken = tmp_path / "broken-ds"
    shutil.copytree(synth["dataset_dir"], broken)
    save_mask_png(np.zeros((4, 4), dtype=bool), broken / "masks" / "0000.png")
    response = client.post("/eval", json={
        "overrides": SMALL_OVERRIDES,
        "dataset_dir": str(broken),
        "checkpoint": str(tmp / "teacher-run" / "checkpoints" / "final"),
    })
    assert response.status_code == 400
    body = response.json()
    assert body["kind"] == "DatasetError"
    assert "images" in body["detail"] and "masks" in body["detail"]


def test_missing_dataset_404():
    response = client.post("/train/teacher", json={
        "overrides": SMALL_OVERRIDES, "dataset_dir": "/nonexistent/place",
    })
    assert response.status_code == 404


def test_missing_checkpoint_404(dataset):
    _, synth = dataset
    response = client.post("/eval", json={
        "overrides": SMALL_OVERRIDES,
        "dataset_dir": synth["dataset_dir"],
        "checkpoint": "/nonexistent/ckpt",
    })
    assert response.status_code == 404


def test_unknown_ablation_axis_400(dataset, tmp_path):
    _, synth = dataset
    response = client.post("/ablate", json={
        "overrides": {**SMALL_OVERRIDES, "run.root": str(tmp_path / "runs")},
        "dataset_dir": synth["dataset_dir"],
        "axis": "nonsense",
    })
    assert response.status_code == 400
    assert response.json()["kind"] == "ablate"
