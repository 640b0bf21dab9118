import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfuse.core import (
    DatasetManifest,
    ManifestError,
    ModalityKind,
    Task,
    canonical_order,
    label_space,
    validate_manifest,
)

from .conftest import jsonl, record


def test_emotion_label_space_alphabetical():
    ls = label_space("emotion")
    assert ls.labels == ("anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise")
    assert len(ls) == 7


def test_sentiment_label_space():
    assert label_space(Task.SENTIMENT).labels == ("negative", "neutral", "positive")


def test_label_space_is_stable():
    assert label_space("emotion") is label_space(Task.EMOTION)


@pytest.mark.parametrize("task", list(Task))
def test_index_name_bijection(task):
    ls = label_space(task)
    assert ls.name(ls.index("neutral")) == "neutral"
    assert sorted(ls.index(n) for n in ls.labels) == list(range(len(ls)))


@pytest.mark.parametrize("task", list(Task))
def test_one_hot_has_single_one(task):
    ls = label_space(task)
    for i in range(len(ls)):
        v = ls.one_hot(i)
        assert sum(v) == 1 and v[i] == 1


def test_modality_canonical_order():
    assert [m.value for m in ModalityKind] == ["text", "voice", "face", "video"]
    assert canonical_order(["video", "text", "face"]) == [ModalityKind.TEXT, ModalityKind.FACE, ModalityKind.VIDEO]
    assert ModalityKind.from_code(3) is ModalityKind.VIDEO


def test_valid_three_record_manifest(small_manifest_text):
    m = validate_manifest(small_manifest_text)
    assert isinstance(m, DatasetManifest)
    assert len(m) == 3
    assert m.records[1].audio_ref is None
    assert [r.utterance_id for r in m.split("test")] == ["u3"]


def test_label_out_of_range_reported_with_line():
    raw = jsonl(record("u1"), record("u2", emotion=7))
    with pytest.raises(ManifestError) as exc:
        validate_manifest(raw)
    (issue,) = exc.value.issues
    assert issue.line == 2
    assert "label out of range" in issue.message


def test_duplicate_id_names_the_id():
    raw = jsonl(record("dup"), record("x"), record("dup", split="test"))
    with pytest.raises(ManifestError) as exc:
        validate_manifest(raw)
    (issue,) = exc.value.issues
    assert issue.line == 3 and "'dup'" in issue.message


def test_unknown_split_and_missing_field_collected_together():
    bad = record("u2", split="holdout")
    missing = record("u3")
    del missing["speaker"]
    with pytest.raises(ManifestError) as exc:
        validate_manifest(jsonl(record("u1"), bad, missing))
    lines = {(i.line, ("split" in i.message) or ("speaker" in i.message)) for i in exc.value.issues}
    assert lines == {(2, True), (3, True)}


def test_null_labels_allowed():
    m = validate_manifest(jsonl(record("u1", emotion=None, sentiment=None)))
    assert m.records[0].label("emotion") is None


def test_csv_manifest_maps_label_names():
    raw = (
        "utterance_id,dialogue_id,speaker,text,audio_ref,video_ref,emotion_label,sentiment_label,split\n"
        'u1,d1,Rachel,"Hi, there",a.wav,,joy,positive,train\n'
        "u2,d1,Ross,oh,,,,,test\n"
    )
    m = validate_manifest(raw)
    r1, r2 = m.records
    assert r1.text == "Hi, there"
    assert r1.emotion_label == label_space("emotion").index("joy")
    assert r1.sentiment_label == 2
    assert r1.video_ref is None and r2.emotion_label is None


def test_csv_unknown_label_name():
    raw = (
        "utterance_id,dialogue_id,speaker,text,audio_ref,video_ref,emotion_label,sentiment_label,split\n"
        "u1,d1,R,x,,,happy,positive,train\n"
    )
    with pytest.raises(ManifestError) as exc:
        validate_manifest(raw)
    assert exc.value.issues[0].line == 2


def test_invalid_json_line():
    with pytest.raises(ManifestError) as exc:
        validate_manifest(jsonl(record("u1")) + "{not json\n")
    assert exc.value.issues[0].line == 2


_ids = st.text(alphabet="abcdefgh0123456789-_", min_size=1, max_size=8)
_records = st.lists(
    st.tuples(
        _ids,
        st.sampled_from(["train", "dev", "test"]),
        st.one_of(st.none(), st.integers(0, 6)),
        st.one_of(st.none(), st.integers(0, 2)),
        st.text(max_size=12),
        st.one_of(st.none(), st.just("clip.mp4")),
    ),
    max_size=12,
    unique_by=lambda t: t[0],
)


@given(_records)
def test_validate_is_idempotent_and_splits_disjoint(rows):
    raw = jsonl(*(record(u, s, text=t, video=v, emotion=e, sentiment=se) for u, s, e, se, t, v in rows))
    m = validate_manifest(raw)
    again = validate_manifest(m.to_jsonl())
    assert again.records == m.records
    ids = [set(r.utterance_id for r in m.split(s)) for s in ("train", "dev", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(m)


def test_record_json_round_trip():
    m = validate_manifest(jsonl(record("u1", text="héllo")))
    assert json.loads(m.records[0].to_json())["text"] == "héllo"
