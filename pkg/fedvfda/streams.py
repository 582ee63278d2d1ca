import numpy as np


# Stable identifiers, never renumber: changing one shifts every draw of that stream
STREAM_IDS = {
    "data": 1,
    "init": 2,
    "client": 3,
    "eps": 4,
    "mixup": 5,
    "eval": 6,
}


def get_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Returns an independent random generator for a named sub-stream of the
    experiment seed. Extra integer keys (for example a client id) derive further
    independent streams under the same name."""
    try:
        stream_id = STREAM_IDS[name]
    except KeyError:
        raise ValueError(
            f'Unknown random stream "{name}", expected one of {sorted(STREAM_IDS)}'
        )
    seed_seq = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(stream_id, *[int(k) for k in keys])
    )
    return np.random.Generator(np.random.PCG64(seed_seq))


def get_generator_state(rng: np.random.Generator) -> dict:
    """Returns the serializable state of a generator."""
    return rng.bit_generator.state


def set_generator_state(rng: np.random.Generator, state: dict) -> np.random.Generator:
    rng.bit_generator.state = state
    return rng
