import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeglm.channels import CHANNELS
from eeglm.dataio import (
    FormatError,
    InstructionRecord,
    SynthTaskSpec,
    bandpower,
    load_checkpoint,
    read_instruction_manifest,
    read_recording,
    rng_from_state,
    rng_state,
    save_checkpoint,
    synth_generate,
    write_instruction_manifest,
    write_recording,
)
from eeglm.preprocess import RawRecording
from eeglm.templates import PAPER_TASKS, get_template
from eeglm.tokenizer import dft_magnitude


@settings(max_examples=25, deadline=None)
@given(
    c=st.integers(1, 5),
    n=st.integers(0, 300),
    rate=st.sampled_from([128.0, 200.0, 250.0, 512.0]),
    seed=st.integers(0, 2**16),
)
def test_recording_round_trip(tmp_path_factory, c, n, rate, seed):
    rng = np.random.default_rng(seed)
    names = tuple(rng.choice(CHANNELS, size=c, replace=False))
    x = rng.standard_normal((c, n)).astype(np.float32)
    path = tmp_path_factory.mktemp("rec") / "r.nlm"
    write_recording(path, RawRecording(names, rate, x))
    back = read_recording(path)
    assert back.channel_ids == names and back.sampling_rate == rate
    assert back.samples.tobytes() == x.tobytes()


def test_recording_errors(tmp_path):
    path = tmp_path / "r.nlm"
    write_recording(path, RawRecording(("C3",), 200.0, np.zeros((1, 10))))
    good = path.read_bytes()
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        read_recording(path)
    path.write_bytes(good[:-3])
    with pytest.raises(FormatError):
        read_recording(path)
    path.write_bytes(good.replace(b"C3", b"Q9"))
    with pytest.raises(KeyError):
        read_recording(path)


def test_checkpoint_round_trip_and_double_save(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a/w": rng.standard_normal((3, 4)).astype(np.float32),
        "a/i": np.arange(5, dtype=np.int64),
        "b/x": rng.standard_normal(2),
        "b/empty": np.zeros((0, 3)),
    }
    meta = {"step": 7, "rng": rng_state(rng), "cfg": {"dim": 4}}
    save_checkpoint(tmp_path / "a.nlmc", tensors, meta)
    ck = load_checkpoint(tmp_path / "a.nlmc")
    for k, v in tensors.items():
        assert ck.tensors[k].dtype == v.dtype and ck.tensors[k].tobytes() == v.tobytes()
    assert ck.meta == json.loads(json.dumps(meta))
    assert set(ck.section("a")) == {"w", "i"}
    save_checkpoint(tmp_path / "b.nlmc", ck.tensors, ck.meta)
    assert (tmp_path / "a.nlmc").read_bytes() == (tmp_path / "b.nlmc").read_bytes()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.nlmc").write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.nlmc")
    save_checkpoint(tmp_path / "c.nlmc", {"x": np.ones(100)})
    blob = (tmp_path / "c.nlmc").read_bytes()
    (tmp_path / "c.nlmc").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.nlmc")


def test_rng_state_round_trip():
    rng = np.random.default_rng(5)
    rng.random(3)
    clone = rng_from_state(json.loads(json.dumps(rng_state(rng))))
    assert rng.random() == clone.random()


def test_manifest_round_trip_and_template_tasks(tmp_path):
    rec = tmp_path / "r.nlm"
    write_recording(rec, RawRecording(("C3",), 200.0, np.zeros((1, 10))))
    records = [InstructionRecord(rec, 200 * i, task, 0) for i, task in enumerate(PAPER_TASKS)]
    write_instruction_manifest(tmp_path / "m.jsonl", records)
    back = read_instruction_manifest(tmp_path / "m.jsonl")
    assert back == records
    assert len({get_template(r.task).task for r in back}) == 6


def test_manifest_empty_and_errors(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_instruction_manifest(tmp_path / "e.jsonl") == []
    rec = tmp_path / "r.nlm"
    write_recording(rec, RawRecording(("C3",), 200.0, np.zeros((1, 10))))
    (tmp_path / "b.jsonl").write_text(
        json.dumps({"recording": "r.nlm", "task": "TUAB", "label": 0}) + "\n"
        + json.dumps({"recording": "r.nlm", "task": "TUAB", "label": 5}) + "\n"
    )
    with pytest.raises(ValueError, match=":2:"):
        read_instruction_manifest(tmp_path / "b.jsonl")
    (tmp_path / "t.jsonl").write_text(json.dumps({"recording": "r.nlm", "task": "NOPE", "label": 0}) + "\n")
    with pytest.raises(ValueError):
        read_instruction_manifest(tmp_path / "t.jsonl")
    (tmp_path / "f.jsonl").write_text(json.dumps({"recording": "gone.nlm", "task": "TUAB", "label": 0}) + "\n")
    with pytest.raises(FileNotFoundError):
        read_instruction_manifest(tmp_path / "f.jsonl")


def test_synth_is_deterministic_and_peaks_at_signature():
    spec = SynthTaskSpec("SYN2", (((10.0, 50.0),), ((30.0, 50.0),)), noise=0.0, n_per_class=2, seed=3)
    a, b = synth_generate(spec), synth_generate(spec)
    assert all(x[0].samples.tobytes() == y[0].samples.tobytes() for x, y in zip(a, b))
    rec, label = a[0]
    assert label == 0
    mags = dft_magnitude(rec.samples[0])
    freqs = np.arange(1, len(mags) + 1) * rec.sampling_rate / rec.n_samples
    assert freqs[np.argmax(mags)] == 10.0


def test_synth_rejects_overlapping_signatures():
    with pytest.raises(ValueError):
        synth_generate(SynthTaskSpec("X", (((10.0, 1.0),), ((10.0, 1.0),))))


def test_bandpower_oracle_separates_synth_classes():
    spec = SynthTaskSpec("SYN2", (((6.0, 100.0),), ((30.0, 100.0),)), noise=10.0, n_per_class=100, seed=1)
    data = synth_generate(spec)
    correct = 0
    for rec, label in data:
        pred = int(bandpower(rec.samples, 200.0, 30.0).mean() > bandpower(rec.samples, 200.0, 6.0).mean())
        correct += pred == label
    assert correct / len(data) > 0.99
