"""Save and load whole codec / recognizer models with their configs."""

from .checkpoint import CheckpointMismatchError, load_checkpoint, load_into, save_checkpoint
from .codec import Codec, CodecConfig
from .recognizer import Recognizer, RecognizerConfig

CODEC_META = "meta/codec_config"
RECOGNIZER_META = "meta/recognizer_config"


def codec_state(codec):
    state = dict(codec.state_dict())
    state[CODEC_META] = codec.config.as_vector()
    return state


def recognizer_state(recognizer):
    state = dict(recognizer.state_dict())
    state[RECOGNIZER_META] = recognizer.config.as_vector()
    return state


def save_codec(codec, path):
    return save_checkpoint(codec_state(codec), path)


def save_recognizer(recognizer, path):
    return save_checkpoint(recognizer_state(recognizer), path)


def codec_from_state(state, expected=None):
    """Build a :class:`Codec` from a checkpoint mapping.

    With ``expected`` (a :class:`CodecConfig`), a checkpoint written for a
    different configuration is refused, naming the first mismatched tensor.
    """
    if CODEC_META not in state:
        raise CheckpointMismatchError(f"checkpoint has no {CODEC_META!r} entry; not a codec checkpoint", CODEC_META)
    config = CodecConfig.from_vector(state[CODEC_META])
    codec = Codec(expected or config)
    load_into(codec, state)
    return codec


def recognizer_from_state(state, expected=None):
    if RECOGNIZER_META not in state:
        raise CheckpointMismatchError(
            f"checkpoint has no {RECOGNIZER_META!r} entry; not a recognizer checkpoint", RECOGNIZER_META
        )
    config = RecognizerConfig.from_vector(state[RECOGNIZER_META])
    recognizer = Recognizer(expected or config)
    load_into(recognizer, state)
    return recognizer


def load_codec(path, expected=None):
    return codec_from_state(load_checkpoint(path), expected)


def load_recognizer(path, expected=None):
    return recognizer_from_state(load_checkpoint(path), expected)
