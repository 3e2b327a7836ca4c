import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from s3shift import FrameStacker, GlobalCMVN, LogMelFeaturizer, ShiftResNetClassifier
from s3shift.audio import AudioClip, cmvn_fit, extract_features, logmel_features
from s3shift.datasets import synth_dataset
from s3shift.engine import ShiftEngine


@pytest.fixture(scope="module")
def fitted():
    d = synth_dataset(classes=3, per_class=10, rng=2, frames=8)
    names = np.array(["down", "left", "up"])
    clf = ShiftResNetClassifier(mode="s3", epochs=3, lr=0.02, t_fixed=8, random_state=1)
    clf.fit(d.train.features, names[d.train.labels], eval_set=(d.val.features, names[d.val.labels]))
    return clf, d, names


def test_get_params_and_clone():
    clf = ShiftResNetClassifier(mode="d3", epochs=5)
    params = clf.get_params()
    assert params["mode"] == "d3" and params["epochs"] == 5 and params["lr"] == 1e-4
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    twin.set_params(mode="s2")
    assert clf.mode == "d3"


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        ShiftResNetClassifier().predict(np.zeros((1, 8, 400)))
    with pytest.raises(NotFittedError):
        GlobalCMVN().transform([np.zeros((3, 80))])


def test_fit_predict(fitted):
    clf, d, names = fitted
    assert list(clf.classes_) == ["down", "left", "up"]
    assert len(clf.history_) == 3
    pred = clf.predict(d.test.features)
    assert set(pred) <= set(names)
    proba = clf.predict_proba(np.stack(d.test.features))
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_array_equal(names[np.argmax(proba, axis=1)], pred)
    assert 0.0 <= clf.score(d.test.features, names[d.test.labels]) <= 1.0
    assert isinstance(clf.to_engine(), ShiftEngine)


def test_from_checkpoint_reproduces_predictions(fitted):
    clf, d, names = fitted
    again = ShiftResNetClassifier.from_checkpoint(clf.checkpoint_, classes=clf.classes_)
    np.testing.assert_array_equal(again.decision_function(d.test.features), clf.decision_function(d.test.features))


def test_input_validation(fitted):
    clf, _, _ = fitted
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 8, 80)))
    with pytest.raises(ValueError):
        clf.predict([])
    with pytest.raises(ValueError):
        ShiftResNetClassifier(epochs=1).fit(np.zeros((2, 8, 400)), [0, 0])
    with pytest.raises(ValueError):
        ShiftResNetClassifier(epochs=1).fit(np.zeros((2, 8, 400)), [0, 1, 1])


def test_feature_pipeline_matches_function():
    rng = np.random.default_rng(0)
    clips = [AudioClip((0.1 * rng.normal(size=n)).astype(np.float32)) for n in (4000, 5600, 3300)]
    pipe = make_pipeline(LogMelFeaturizer(), GlobalCMVN("train"), FrameStacker())
    out = pipe.fit_transform(clips)
    stats = cmvn_fit([logmel_features(c) for c in clips])
    for got, clip in zip(out, clips):
        np.testing.assert_array_equal(got, extract_features(clip, stats))
    assert pipe.named_steps["globalcmvn"].stats_.corpus == "train"
