import numpy as np
import pytest
from hypothesis import given, settings
from cases import random_frame_bytes
from hypothesis import strategies as st

from panograph.errors import ConfigError, DataError, FormatError
from panograph.scene_io import (
    CAR,
    PEDESTRIAN,
    SYNTHETIC_CLASSES,
    TRUCK,
    ClassTable,
    PointCloudFrame,
    SyntheticSceneConfig,
    decode_labels,
    encode_labels,
    generate_synthetic_scene,
    read_frame,
    write_frame,
)


def test_label_word_decoding():
    sem, inst = decode_labels(np.array([0x0005000A], dtype=np.uint32))
    assert sem[0] == 10 and inst[0] == 5


def test_label_limit_encoding():
    assert encode_labels(np.array([65535]), np.array([65535]))[0] == 0xFFFFFFFF


def test_encode_rejects_out_of_range():
    with pytest.raises(DataError):
        encode_labels(np.array([65536]), np.array([0]))


def test_empty_files(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"")
    (tmp_path / "a.label").write_bytes(b"")
    frame = read_frame(tmp_path / "a.bin", tmp_path / "a.label")
    assert len(frame) == 0
    write_frame(frame, tmp_path / "b.bin", tmp_path / "b.label")
    assert (tmp_path / "b.bin").read_bytes() == b""
    assert (tmp_path / "b.label").read_bytes() == b""


def test_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        b, lab = random_frame_bytes(rng, int(rng.integers(0, 300)))
        (tmp_path / "in.bin").write_bytes(b)
        (tmp_path / "in.label").write_bytes(lab)
        frame = read_frame(tmp_path / "in.bin", tmp_path / "in.label")
        write_frame(frame, tmp_path / "out.bin", tmp_path / "out.label")
        assert (tmp_path / "out.bin").read_bytes() == b
        assert (tmp_path / "out.label").read_bytes() == lab


def test_size_mismatch_is_format_error(tmp_path):
    (tmp_path / "a.bin").write_bytes(np.zeros(8, "<f4").tobytes())
    (tmp_path / "a.label").write_bytes(np.zeros(3, "<u4").tobytes())
    with pytest.raises(FormatError):
        read_frame(tmp_path / "a.bin", tmp_path / "a.label")
    (tmp_path / "b.bin").write_bytes(b"\0" * 17)
    with pytest.raises(FormatError):
        read_frame(tmp_path / "b.bin", tmp_path / "a.label")


def test_non_finite_is_data_error(tmp_path):
    data = np.zeros((2, 4), "<f4")
    data[1, 2] = np.nan
    (tmp_path / "a.bin").write_bytes(data.tobytes())
    (tmp_path / "a.label").write_bytes(np.zeros(2, "<u4").tobytes())
    with pytest.raises(DataError):
        read_frame(tmp_path / "a.bin", tmp_path / "a.label")


def test_byte_scale_intensity_is_normalized(tmp_path):
    data = np.array([[0, 0, 0, 255.0], [1, 1, 1, 51.0]], "<f4")
    (tmp_path / "a.bin").write_bytes(data.tobytes())
    (tmp_path / "a.label").write_bytes(np.zeros(2, "<u4").tobytes())
    frame = read_frame(tmp_path / "a.bin", tmp_path / "a.label")
    np.testing.assert_allclose(frame.intensity, [1.0, 0.2], rtol=1e-6)


def test_class_table_parse_and_errors():
    table = ClassTable.parse("# id,name,kind\n0,road,stuff\n1, car ,thing\n\n")
    assert table.names == {0: "road", 1: "car"} and table.thing_ids == [1]
    assert ClassTable.parse(table.to_text()) == table
    for bad in ("0,road", "x,road,stuff", "0,a,stuff\n0,b,stuff", "0,road,blob", "70000,a,stuff"):
        with pytest.raises(ConfigError):
            ClassTable.parse(bad)


def test_frame_shape_check():
    with pytest.raises(FormatError):
        PointCloudFrame(np.zeros((3, 3), np.float32), np.zeros(2, np.float32), np.zeros(3, np.uint16), np.zeros(3, np.uint16))


def test_stuff_with_instance_fails_validation():
    frame = PointCloudFrame(
        np.zeros((1, 3), np.float32), np.zeros(1, np.float32), np.array([0], np.uint16), np.array([3], np.uint16), SYNTHETIC_CLASSES
    )
    with pytest.raises(DataError):
        frame.validate()


def test_scene_without_objects_is_all_stuff():
    frame = generate_synthetic_scene(SyntheticSceneConfig(n_cars=0, n_trucks=0, n_pedestrians=0))
    assert len(frame) > 0
    assert not frame.thing_mask.any()
    assert not frame.instance.any()


def test_three_cars_three_ids():
    frame = generate_synthetic_scene(SyntheticSceneConfig(n_cars=3, n_trucks=0, n_pedestrians=0, seed=3))
    ids = np.unique(frame.instance[frame.thing_mask])
    assert len(ids) == 3 and ids.min() >= 1
    assert set(np.unique(frame.semantic[frame.thing_mask])) == {CAR}


def test_same_seed_same_bytes(tmp_path):
    cfg = SyntheticSceneConfig(crowding=True, seed=11)
    for tag in "ab":
        write_frame(generate_synthetic_scene(cfg), tmp_path / f"{tag}.bin", tmp_path / f"{tag}.label")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.label").read_bytes() == (tmp_path / "b.label").read_bytes()


def test_degenerate_config_rejected():
    for bad in (
        SyntheticSceneConfig(n_cars=-1),
        SyntheticSceneConfig(ground_density=0.0),
        SyntheticSceneConfig(extent=2.0, min_range=3.0),
        SyntheticSceneConfig(car_size=((0.0, 1.0), (1.0, 2.0), (1.0, 2.0))),
    ):
        with pytest.raises(ConfigError):
            generate_synthetic_scene(bad)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31 - 1), crowding=st.booleans(), cars=st.integers(0, 4), peds=st.integers(0, 6))
def test_generated_frames_satisfy_invariants(seed, crowding, cars, peds):
    frame = generate_synthetic_scene(SyntheticSceneConfig(n_cars=cars, n_trucks=1, n_pedestrians=peds, crowding=crowding, seed=seed))
    frame.validate()
    thing = frame.thing_mask
    assert np.all(frame.instance[thing] > 0)
    n_objects = len(np.unique(frame.instance[thing]))
    assert n_objects <= cars + 1 + peds
    if not crowding:
        assert n_objects == cars + 1 + peds
    assert np.unique(frame.instance[thing]).tolist() == list(range(1, n_objects + 1))
    # one class per instance
    for i in np.unique(frame.instance[thing]):
        assert len(np.unique(frame.semantic[frame.instance == i])) == 1
    assert set(np.unique(frame.semantic[thing])) <= {CAR, TRUCK, PEDESTRIAN}
    assert frame.xyz.dtype == np.float32


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 65535), st.integers(0, 65535)), max_size=50))
def test_label_encoding_round_trip(pairs):
    sem = np.array([p[0] for p in pairs], dtype=np.int64)
    inst = np.array([p[1] for p in pairs], dtype=np.int64)
    s, i = decode_labels(encode_labels(sem, inst))
    assert s.tolist() == sem.tolist() and i.tolist() == inst.tolist()
