"""Writes the nibabel-produced golden files read by the NIfTI tests.

    python3 make_nibabel.py

Voxel (z, y, x) = (k // 12, (k // 4) % 3, k % 4) holds the k-th value.
"""

import nibabel as nib
import numpy as np

k = np.arange(24, dtype=np.float64)
for name, dtype, values in [
    ("nibabel_i16.nii.gz", np.int16, (k - 12) * 1000),
    ("nibabel_f32.nii", np.float32, (k - 5) * 0.125),
]:
    zyx = values.astype(dtype).reshape(2, 3, 4)
    img = nib.Nifti1Image(np.ascontiguousarray(zyx.transpose(2, 1, 0)), np.diag([0.5, 0.75, 2.5, 1.0]))
    img.header.set_data_dtype(dtype)
    img.header.set_zooms((0.5, 0.75, 2.5))
    nib.save(img, name)
