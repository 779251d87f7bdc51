#pragma once

#include <string>

#include "m2m/core/volume.h"

namespace m2m {

// File I/O for scalar volumes, label volumes, and dense vector fields.
//
// Formats, chosen by extension:
//   .nii / .nii.gz  NIfTI-1, little-endian, single-file (magic "n+1").
//                   Scalar datatypes uint8, int16, float32, float64 are read;
//                   scl_slope/scl_inter are applied (slope 0 reads as 1).
//                   Volumes are written as float32, labels as uint8, vector
//                   fields with dim = [5, X, Y, Z, 1, 3] float32.
//                   qform/sform are carried through but never applied.
//   .rvol           raw little-endian format: 16-byte magic "M2MREGRAWVOL\0\0\0\0",
//                   3 x u32 shape, 3 x f32 spacing, float32 payload (x fastest).
//
// No orientation resampling is performed anywhere; all data live on their
// voxel grids.

Volume load_volume(const std::string& path);
void save_volume(const Volume& vol, const std::string& path);

LabelVolume load_labels(const std::string& path);
void save_labels(const LabelVolume& labels, const std::string& path);

// Vector fields (3 components per voxel, voxel units).
Grid<double> load_field(const std::string& path);
void save_field(const Grid<double>& field, const std::string& path);

}  // namespace m2m
