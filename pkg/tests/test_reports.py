import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazedistill.reports import (
    BOUNDARIES,
    CHARACTERISTICS,
    CONFIDENCES,
    LOCATIONS,
    FixtureMissingError,
    LesionReport,
    ProviderTransportError,
    ReportError,
    ReportParseError,
    ReportRangeError,
    ReportSchemaError,
    ReportVocabularyError,
    VLMClient,
    build_prompt,
    canonical_json,
    canonical_text,
    image_digest,
    validate_report,
)

VALID = {
    "location": "upper left",
    "boundary": "clear",
    "characteristics": ["smooth"],
    "area_percent": 12.5,
    "confidence": "high",
    "remarks": "",
}


class TestPrompt:
    def test_contains_area_percentage(self):
        assert "Area Percentage" in build_prompt()

    def test_byte_stable(self):
        assert build_prompt() == build_prompt()
        assert build_prompt().encode() == build_prompt().encode()

    def test_constrained_field_names_exactly_once(self):
        prompt = build_prompt()
        for name in ("Location", "Boundary", "Characteristics", "Area Percentage", "Confidence"):
            assert prompt.count(name) == 1, name

    def test_allowed_values_spelled_out(self):
        prompt = build_prompt()
        for value in ("upper left", "lower right", "clear", "irregular", "ambiguous",
                      "smooth", "spiculated", "lobulated", "high/moderate/low"):
            assert value in prompt


class TestValidateReport:
    def test_valid_instance(self):
        report = validate_report(json.dumps(VALID))
        assert report == LesionReport(
            location="upper_left",
            boundary="clear",
            characteristics=("smooth",),
            area_percent=12.5,
            confidence="high",
            remarks="",
        )

    def test_underscore_spelling_accepted(self):
        report = validate_report(json.dumps({**VALID, "location": "upper_left"}))
        assert report.location == "upper_left"

    def test_location_out_of_vocabulary(self):
        with pytest.raises(ReportVocabularyError) as err:
            validate_report(json.dumps({**VALID, "location": "center"}))
        assert err.value.field == "location" and err.value.value == "center"

    def test_area_out_of_range(self):
        with pytest.raises(ReportRangeError):
            validate_report(json.dumps({**VALID, "area_percent": 120}))
        with pytest.raises(ReportRangeError):
            validate_report(json.dumps({**VALID, "area_percent": -1}))

    def test_non_json_is_parse_error(self):
        with pytest.raises(ReportParseError):
            validate_report("definitely not json {")
        with pytest.raises(ReportParseError):
            validate_report("[1, 2, 3]")

    def test_missing_key_named(self):
        broken = {k: v for k, v in VALID.items() if k != "boundary"}
        with pytest.raises(ReportSchemaError) as err:
            validate_report(json.dumps(broken))
        assert err.value.key == "boundary"

    def test_markdown_fences_unwrapped(self):
        fenced = "```json\n" + json.dumps(VALID) + "\n```"
        assert validate_report(fenced).location == "upper_left"

    def test_characteristics_must_be_nonempty_list(self):
        with pytest.raises(ReportSchemaError):
            validate_report(json.dumps({**VALID, "characteristics": []}))
        with pytest.raises(ReportSchemaError):
            validate_report(json.dumps({**VALID, "characteristics": "smooth"}))

    def test_characteristics_vocabulary_enforced(self):
        with pytest.raises(ReportVocabularyError):
            validate_report(json.dumps({**VALID, "characteristics": ["smooth", "fuzzy"]}))

    def test_area_must_be_number(self):
        with pytest.raises(ReportSchemaError):
            validate_report(json.dumps({**VALID, "area_percent": "12.5"}))
        with pytest.raises(ReportSchemaError):
            validate_report(json.dumps({**VALID, "area_percent": True}))

    def test_case_and_whitespace_normalized(self):
        report = validate_report(json.dumps({**VALID, "boundary": "  Clear "}))
        assert report.boundary == "clear"

    def test_roundtrip_identity(self):
        report = validate_report(json.dumps(VALID))
        assert validate_report(canonical_json(report)) == report

    @given(st.text(max_size=20))
    @settings(max_examples=150, deadline=None)
    def test_never_returns_out_of_vocabulary(self, junk):
        payload = json.dumps({**VALID, "location": junk, "boundary": junk})
        try:
            report = validate_report(payload)
        except ReportError:
            return
        assert report.location in LOCATIONS
        assert report.boundary in BOUNDARIES
        assert all(c in CHARACTERISTICS for c in report.characteristics)
        assert report.confidence in CONFIDENCES


class TestCanonicalText:
    def test_characteristics_sorted(self):
        report = LesionReport("upper_left", "clear", ("smooth", "lobulated"), 5.0, "high")
        assert "characteristics: lobulated,smooth;" in canonical_text(report)

    def test_deterministic(self):
        a = validate_report(json.dumps(VALID))
        b = validate_report(json.dumps(VALID))
        assert canonical_text(a) == canonical_text(b)

    def test_area_one_decimal(self):
        report = validate_report(json.dumps(VALID))
        assert "area: 12.5%;" in canonical_text(report)
        report2 = validate_report(json.dumps({**VALID, "area_percent": 7}))
        assert "area: 7.0%;" in canonical_text(report2)

    def test_injective_on_constrained_fields(self):
        rendered = set()
        count = 0
        for location in LOCATIONS:
            for boundary in BOUNDARIES:
                for confidence in CONFIDENCES:
                    for characteristics in (("smooth",), ("lobulated", "smooth")):
                        for area in (10.0, 20.0):
                            r = LesionReport(location, boundary, characteristics, area, confidence)
                            rendered.add(canonical_text(r))
                            count += 1
        assert len(rendered) == count


class TestVLMClient:
    def test_replay_returns_fixture_verbatim(self, tmp_path):
        client = VLMClient(mode="replay", fixture_dir=tmp_path)
        image = b"fake-png-bytes"
        client.save_fixture(image, json.dumps(VALID))
        response = client.request_report(image, build_prompt())
        assert response.raw_text == json.dumps(VALID)
        assert response.provider_id == "replay"
        assert response.latency_ms >= 0

    def test_replay_miss_names_hash(self, tmp_path):
        client = VLMClient(mode="replay", fixture_dir=tmp_path)
        image = b"unknown-image"
        with pytest.raises(FixtureMissingError) as err:
            client.request_report(image, "p")
        assert err.value.digest == image_digest(image)

    def test_live_unreachable_endpoint_is_transport_error(self, monkeypatch):
        monkeypatch.setenv("VLM_API_KEY", "k")
        client = VLMClient(
            mode="live",
            endpoint="http://127.0.0.1:1/nothing",
            provider_id="test-provider",
            timeout_s=0.2,
        )
        with pytest.raises(ProviderTransportError) as err:
            client.request_report(b"img", "p")
        assert err.value.provider_id == "test-provider"

    def test_live_without_credential_is_transport_error(self, monkeypatch):
        monkeypatch.delenv("VLM_API_KEY", raising=False)
        client = VLMClient(mode="live", endpoint="http://127.0.0.1:1/x")
        with pytest.raises(ProviderTransportError):
            client.request_report(b"img", "p")

    def test_fixture_file_naming(self, tmp_path):
        client = VLMClient(mode="replay", fixture_dir=tmp_path)
        image = b"abc"
        path = client.save_fixture(image, "{}")
        assert path.name == f"{image_digest(image)}.json"
