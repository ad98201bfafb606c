import pytest

TINY_YAML = """\
name: tiny
dataset:
  phantom: {seed: 3, image_size: 64, train: 40, val: 20, test: 20, min_per_class: 2}
vit: {image_size: 64, patch_size: 16, embed_dim: 12, depth: 1, num_heads: 6, mlp_ratio: 2.0}
dino:
  global_crop_size: 64
  local_crop_size: 32
  num_local_crops: 2
  projection_dim: 32
  head_hidden_dim: 16
  head_bottleneck_dim: 8
  epochs: 2
  batch_size: 16
head_selection: {count_ceiling: 8, sample_fraction: 0.25}
downstream: {epochs: 2, batch_size: 8, learning_rate: 0.001}
sweep: [[none, 0.0], [RE, 0.6], [AGE, 0.6]]
seeds: [0, 1]
output_dir: tiny-out
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
