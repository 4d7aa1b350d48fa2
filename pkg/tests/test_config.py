import pytest
import yaml

from cdssl.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    default_studies,
    load_config,
    save_config,
)


def _base(**over):
    raw = {
        "seed": 3,
        "data": {"studies": [
            {"name": "A", "subjects": 10, "roles": ["ssl"]},
            {"name": "B", "subjects": 10, "roles": ["finetune", "in_study_test"]},
        ]},
    }
    raw.update(over)
    return raw


def test_yaml_roundtrip_is_lossless(tmp_path):
    cfg = config_from_dict(_base(ssl={"stages": [{"dataset": "generic", "method": "barlow_twins", "epochs": 2}]}))
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_hash_ignores_numeric_spelling_and_output_dir():
    a = config_from_dict(_base(finetune={"learning_rate": 1, "epochs": 4}))
    b = config_from_dict(_base(finetune={"learning_rate": 1.0, "epochs": 4.0}, output_dir="elsewhere"))
    assert a.config_hash() == b.config_hash()
    c = config_from_dict(_base(finetune={"learning_rate": 2.0, "epochs": 4}))
    assert c.config_hash() != a.config_hash()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict(_base(finetune={"lr": 1e-3}))
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict(_base(bogus=1))


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        config_from_dict(_base(finetune={"epochs": "ten"}))
    with pytest.raises(ConfigError):
        config_from_dict(_base(finetune={"epochs": 2.5}))


def test_empty_stage_list_means_random_init():
    assert config_from_dict(_base()).init_kind() == "random"


def test_ssl_chain_means_checkpoint_init():
    cfg = config_from_dict(_base(ssl={"stages": [
        {"dataset": "generic", "method": "barlow_twins"},
        {"dataset": "indomain", "method": "simclr"},
    ]}))
    assert cfg.init_kind() == "ssl_checkpoint"
    assert [s.method for s in cfg.ssl.stages] == ["barlow_twins", "simclr"]


def test_supervised_only_means_supervised_generic():
    cfg = config_from_dict(_base(ssl={"stages": [{"dataset": "generic", "method": "supervised"}]}))
    assert cfg.init_kind() == "supervised_generic"
    mixed = config_from_dict(_base(ssl={"stages": [
        {"dataset": "generic", "method": "supervised"},
        {"dataset": "indomain", "method": "simclr"},
    ]}))
    assert mixed.init_kind() == "ssl_checkpoint"


def test_inconsistent_init_rejected():
    with pytest.raises(ConfigError, match="inconsistent"):
        config_from_dict(_base(finetune={"init": "ssl_checkpoint"}))
    with pytest.raises(ConfigError, match="inconsistent"):
        config_from_dict(_base(finetune={"init": "random"}, ssl={"stages": [{"dataset": "generic", "method": "simclr"}]}))


def test_supervised_indomain_stage_rejected():
    with pytest.raises(ConfigError, match="labelled generic"):
        config_from_dict(_base(ssl={"stages": [{"dataset": "indomain", "method": "supervised"}]}))


def test_study_validation():
    with pytest.raises(ConfigError, match="unknown role"):
        config_from_dict({"data": {"studies": [{"name": "A", "subjects": 3, "roles": ["train"]}]}})
    with pytest.raises(ConfigError, match="orientation"):
        config_from_dict({"data": {"studies": [{"name": "A", "subjects": 3, "roles": ["finetune"], "orientations": ["XYZ"]}]}})
    with pytest.raises(ConfigError, match="finetune role"):
        config_from_dict({"data": {"studies": [{"name": "A", "subjects": 3, "roles": ["ssl"]}]}})


def test_indomain_stage_needs_ssl_study():
    raw = {"data": {"studies": [{"name": "B", "subjects": 5, "roles": ["finetune"]}]},
           "ssl": {"stages": [{"dataset": "indomain", "method": "simclr"}]}}
    with pytest.raises(ConfigError, match="ssl role"):
        config_from_dict(raw)


def test_default_studies_shape():
    studies = default_studies(labeled=300, unlabeled=400, out_study=40)
    by = {s.name: s for s in studies}
    assert sum(s.subjects for s in studies if "finetune" in s.roles) == 300
    assert by["HABS"].roles == ["ssl"]
    assert by["ABBY"].label_offset == 0.5 and by["ABBY"].orientations == ["LPS"]
    cfg = ExperimentConfig()
    cfg.data.studies = studies
    cfg.validate()
    assert yaml.safe_load(cfg.to_yaml())["data"]["studies"][0]["name"] == "HABS"
