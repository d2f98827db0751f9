import numpy as np
import pytest

from taskcodec import data
from taskcodec.codec import Codec, CodecConfig
from taskcodec.recognizer import Recognizer, RecognizerConfig
from taskcodec.trainer import TrainConfig, pretrain_codec, pretrain_recognizer

FACE_HW = (32, 32)


def train_toy_recognizer(seed=0, epochs=60, n_identities=10, per_identity=30, test_per_identity=10):
    """Small recognizer trained on synthetic faces; returns (recognizer, train, test)."""
    faces = data.make_face_dataset(n_identities, per_identity, *FACE_HW, seed=seed)
    train, test = data.split_per_identity(faces, test_per_identity, seed=seed)
    config = RecognizerConfig(*FACE_HW, (8, 16, 32), 1, 32, n_identities)
    recognizer = Recognizer(config, seed=seed)
    schedule = TrainConfig.preset("classifier_pretrain", epochs=epochs, batch_size=20, lr=0.05, lr_final=0.005,
                                 momentum=0.9, freeze=(), seed=seed)
    pretrain_recognizer(train, recognizer.extractor, recognizer.head, schedule)
    return recognizer, train, test


def train_toy_codec(seed=0, epochs=10, base_channels=16, workdir=None):
    """Codec pretrained with the codec preset on 256 synthetic texture patches."""
    import tempfile

    workdir = workdir or tempfile.mkdtemp(prefix="taskcodec-tex-")
    data.write_patch_corpus(workdir, n_images=16, size=64, seed=seed)
    patches = data.ingest_patches(workdir, 32, rotations=(0, 90, 180, 270), seed=seed)
    codec = Codec(CodecConfig(base_channels=base_channels), seed=seed)
    result = pretrain_codec(patches, codec, TrainConfig.preset("codec_pretrain", epochs=epochs, seed=seed))
    return codec, result


@pytest.fixture(scope="session")
def toy_codec(tmp_path_factory):
    return train_toy_codec(workdir=tmp_path_factory.mktemp("tex"))[0]


@pytest.fixture(scope="session")
def toy_recognizer():
    return train_toy_recognizer(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
