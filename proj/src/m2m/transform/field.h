#pragma once

#include "m2m/core/grid.h"
#include "m2m/core/volume.h"

namespace m2m {

// Displacement fields are 3-channel grids in voxel units, defined on the grid
// of the space they map from (the registration target). The transform is
// Phi(x) = x + u(x); images are pulled back: out(x) = img(x + u(x)).

enum class Interp { Linear, Nearest };

// Throws unless `field` has 3 channels and only finite values.
void validate_field(const Grid<double>& field);

Grid<double> identity_field(Shape3 shape);

Volume warp_image(const Volume& img, const Grid<double>& field, Interp interp = Interp::Linear);
LabelVolume warp_labels(const LabelVolume& labels, const Grid<double>& field);

// (Phi_outer o Phi_inner)(x): u(x) = u_inner(x) + u_outer(x + u_inner(x)),
// the outer field sampled with trilinear interpolation, clamp-to-edge.
Grid<double> compose(const Grid<double>& outer, const Grid<double>& inner);

// 9 channels per voxel, channel 3*i+j = d(Phi_i)/d(x_j) = delta_ij + d(u_i)/d(x_j).
// Central differences in the interior, one-sided at faces, voxel units.
Grid<double> jacobian(const Grid<double>& field);

// (#voxels with det(grad Phi) < 0) / (#voxels), in [0, 1].
double neg_jacobian_fraction(const Grid<double>& field);

// Scaling and squaring: phi_0 = v / 2^steps, then phi <- phi o phi, `steps` times.
Grid<double> integrate_svf(const Grid<double>& v, int steps);

// Separable Gaussian, kernel truncated at 3 sigma, weights renormalized where
// the window leaves the domain. sigma <= 0 returns the input unchanged.
Grid<double> gaussian_smooth(const Grid<double>& grid, double sigma);

double max_abs(const Grid<double>& grid);

}  // namespace m2m
