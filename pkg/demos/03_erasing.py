"""AGE and random erasing side by side on one phantom."""
from pathlib import Path

import numpy as np
from PIL import Image

from age_kit.dataset import generate_phantom_dataset
from age_kit.erase import AugmentationPolicy, apply_age, apply_policy, apply_random_erasing
from age_kit.seeding import sample_rng

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

_, sample, spec = generate_phantom_dataset(4, {"train": {"D": 1}}, image_size=128)[0]
img, mask = sample.pixels, spec.truth_mask

# AGE keeps the mask, zeroes everything else, and does nothing on a second pass
age = apply_age(img, mask)
assert np.array_equal(apply_age(age, mask), age)

# RE blanks a single random rectangle
rng = np.random.default_rng(0)
re = apply_random_erasing(img, rng=rng)

strip = np.hstack([img, age, re])
Image.fromarray(np.round(strip * 255).astype(np.uint8)).save(out / "erasing.png")

# the policy fires with probability P; each (seed, sample, epoch) has its own stream
policy = AugmentationPolicy("AGE", 0.6, standard_augs=())
fired = [apply_policy(img, mask, policy, sample_rng(0, sample.id, epoch))[1] for epoch in range(1000)]
print("AGE applied in %.1f%% of 1000 epochs" % (100 * np.mean(fired)))
