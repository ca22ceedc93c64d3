import filecmp
import os
import shutil
from dataclasses import replace

import numpy as np
import pytest

from voiceshield.errors import MissingArtifactError, PreconditionError
from voiceshield.pipeline import Artifacts, heldout_trials, load_artifacts, recalibrate, save_artifacts, verifier_for
from voiceshield.speaker import MEL_STATS, MFCC_STATS, embed_speaker


@pytest.fixture(scope="module")
def saved(small_artifacts, tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    save_artifacts(small_artifacts[0], d)
    return d


def test_save_load_roundtrip(saved, small_artifacts, small_corpus, small_waves):
    art = small_artifacts[0]
    back = load_artifacts(saved)
    assert back.encoder_ids == sorted(art.encoder_ids)
    assert back.codec.same_parameters(art.codec)
    w = small_waves(small_corpus.records[0])
    for eid in art.encoder_ids:
        assert back.verifiers[eid] == art.verifiers[eid]
        np.testing.assert_array_equal(embed_speaker(back.encoders[eid], w).vector, embed_speaker(art.encoders[eid], w).vector)
        assert sorted(back.profiles[eid]) == sorted(art.profiles[eid])


def test_save_is_deterministic(saved, small_artifacts, tmp_path):
    save_artifacts(small_artifacts[0], tmp_path)
    cmp = filecmp.dircmp(saved, tmp_path)

    def same(c):
        return not c.diff_files and not c.left_only and not c.right_only and all(same(s) for s in c.subdirs.values())

    assert same(cmp)


def test_missing_pieces_are_reported(saved, tmp_path):
    with pytest.raises(MissingArtifactError):
        load_artifacts(tmp_path / "nothing")
    broken = tmp_path / "broken"
    shutil.copytree(saved, broken)
    shutil.rmtree(broken / "synth" / MEL_STATS)
    with pytest.raises(MissingArtifactError):
        load_artifacts(broken)


def test_check_catches_mismatched_pairing(small_artifacts):
    art = small_artifacts[0]
    swapped = replace(art, synths={MEL_STATS: art.synths[MFCC_STATS], MFCC_STATS: art.synths[MEL_STATS]})
    with pytest.raises(PreconditionError):
        swapped.check()
    with pytest.raises(MissingArtifactError):
        Artifacts(art.codec, dict(art.encoders)).check()
    with pytest.raises(MissingArtifactError):
        verifier_for(art, "nope")


def test_heldout_trials_cover_every_pair(small_corpus, small_waves):
    speakers = sorted({r.speaker for r in small_corpus})
    trials = heldout_trials(small_corpus, small_waves, speakers)
    held = small_corpus.select(split="test")
    assert len(trials) == len(held) * len(speakers)
    assert sum(t[2] for t in trials) == len(held)


def test_recalibrate_is_stable(small_artifacts, small_corpus, small_waves):
    art = small_artifacts[0]
    before = dict(art.verifiers)
    copy = replace(art, verifiers=dict(art.verifiers))
    after = recalibrate(copy, small_corpus, small_waves)
    assert after == before


def test_training_summary_records_calibration(small_artifacts):
    art, summary = small_artifacts
    for eid in art.encoder_ids:
        assert summary[eid]["threshold"] == art.verifiers[eid].threshold
        assert summary[eid]["eer"] <= 0.1


def test_training_needs_a_split(small_corpus):
    from voiceshield.corpus import Manifest
    from voiceshield.pipeline import train_artifacts

    unsplit = Manifest([replace(r, split="", role="") for r in small_corpus], root=small_corpus.root)
    with pytest.raises(PreconditionError):
        train_artifacts(unsplit)
    assert os.path.isdir(small_corpus.root)
