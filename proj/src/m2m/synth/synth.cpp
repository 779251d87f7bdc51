#include "m2m/synth/synth.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "m2m/core/nifti.h"
#include "m2m/eval/metrics.h"
#include "m2m/transform/field.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace m2m {

LabelVolume gen_anatomy(uint64_t seed, Shape3 shape, int n_structs, int margin) {
    for (int a = 0; a < 3; ++a) {
        if (shape[a] < 16) {
            throw std::invalid_argument("gen_anatomy: every extent must be >= 16, got " +
                                        shape_str(shape));
        }
    }
    if (n_structs < 3 || n_structs > 200) {
        throw std::invalid_argument("gen_anatomy: n_structs must be in [3, 200], got " +
                                    std::to_string(n_structs));
    }

    const int nx = shape[0], ny = shape[1], nz = shape[2];
    const std::size_t total = std::size_t(nx) * ny * nz;
    const int ext_min = std::min({nx, ny, nz});
    if (margin < 0) margin = std::min(ext_min / 4, 8);
    if (2 * margin >= ext_min - 2) {
        throw std::invalid_argument("gen_anatomy: margin " + std::to_string(margin) +
                                    " leaves no interior on " + shape_str(shape));
    }
    const double sigma = ext_min / 4.0;
    const double radius = 0.40 * ext_min;
    Rng rng(seed);

    // Equal structure sizes, budgeted against the interior so the chain of
    // blobs always fits: at most 72% of the interior in total, at most 12% of
    // the full volume each, and at least 0.5% each so no class is a sliver.
    std::size_t interior_n = 1;
    for (int a = 0; a < 3; ++a) interior_n *= std::size_t(shape[a] - 2 * margin);
    const auto clamp_sz = [&](double v) {
        return std::max({std::size_t(8), std::size_t(0.005 * double(total)), std::size_t(v)});
    };
    const std::size_t size_each =
        clamp_sz(std::min(0.72 * double(interior_n) / n_structs, 0.12 * double(total)));

    auto better = [](const std::pair<double, std::size_t>& a,
                     const std::pair<double, std::size_t>& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };

    LabelVolume out(shape, n_structs + 1);
    std::vector<uint8_t> interior(total, 0);
    for (int z = margin; z < nz - margin; ++z) {
        for (int y = margin; y < ny - margin; ++y) {
            for (int x = margin; x < nx - margin; ++x) interior[out.idx(x, y, z)] = 1;
        }
    }
    std::vector<uint8_t> parent = interior;  // structure 1 may grow anywhere inside

    const double rk = std::cbrt(3.0 * double(size_each) / (4.0 * 3.14159265358979));
    for (int k = 1; k <= n_structs; ++k) {
        // Candidates: unclaimed interior voxels within a Chebyshev dilation of
        // the previous structure, so consecutive structures stay adjacent.
        const int dil = int(std::ceil(rk)) + 6;
        std::vector<uint8_t> cand = parent, pass_buf(total);
        for (int axis = 0; axis < 3; ++axis) {
            std::fill(pass_buf.begin(), pass_buf.end(), 0);
            for (int z = 0; z < nz; ++z) {
                for (int y = 0; y < ny; ++y) {
                    for (int x = 0; x < nx; ++x) {
                        if (!cand[out.idx(x, y, z)]) continue;
                        const int lo = axis == 0 ? x : axis == 1 ? y : z;
                        const int hi = std::min(lo + dil, int(shape[axis]) - 1);
                        for (int p = std::max(0, lo - dil); p <= hi; ++p) {
                            pass_buf[out.idx(axis == 0 ? p : x, axis == 1 ? p : y,
                                             axis == 2 ? p : z)] = 1;
                        }
                    }
                }
            }
            cand.swap(pass_buf);
        }
        for (std::size_t i = 0; i < total; ++i) {
            cand[i] = cand[i] && interior[i] && out.data[i] == 0;
        }

        // Seed point: a random boundary voxel of the previous structure pushed
        // one blob radius outward along a random direction. Retry until the
        // point lands on a usable candidate.
        std::vector<std::size_t> bnd;
        for (int z = 0; z < nz; ++z) {
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    const std::size_t i = out.idx(x, y, z);
                    if (!parent[i]) continue;
                    const bool edge = k == 1 || (x > 0 && !parent[out.idx(x - 1, y, z)]) ||
                                      (x < nx - 1 && !parent[out.idx(x + 1, y, z)]) ||
                                      (y > 0 && !parent[out.idx(x, y - 1, z)]) ||
                                      (y < ny - 1 && !parent[out.idx(x, y + 1, z)]) ||
                                      (z > 0 && !parent[out.idx(x, y, z - 1)]) ||
                                      (z < nz - 1 && !parent[out.idx(x, y, z + 1)]);
                    if (edge) bnd.push_back(i);
                }
            }
        }
        int cx = -1, cy = -1, cz = -1;
        for (int attempt = 0; attempt < 256 && cx < 0; ++attempt) {
            const std::size_t b = bnd[std::size_t(rng.uniform_int(int(bnd.size())))];
            const int bx = int(b % nx), by = int((b / nx) % ny), bz = int(b / (std::size_t(nx) * ny));
            if (k == 1) {
                cx = bx, cy = by, cz = bz;
                break;
            }
            double dx = rng.normal(), dy = rng.normal(), dz = rng.normal();
            const double norm = std::sqrt(dx * dx + dy * dy + dz * dz);
            if (norm < 1e-9) continue;
            const double step = rk + 2.0;
            const int px = int(std::lround(bx + dx / norm * step));
            const int py = int(std::lround(by + dy / norm * step));
            const int pz = int(std::lround(bz + dz / norm * step));
            if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz) continue;
            if (!cand[out.idx(px, py, pz)]) continue;
            cx = px, cy = py, cz = pz;
        }
        if (cx < 0) {
            const std::size_t b = bnd[0];
            cx = int(b % nx), cy = int((b / nx) % ny), cz = int(b / (std::size_t(nx) * ny));
        }

        // Score: smooth noise plus a strong radial pull toward the seed point,
        // which keeps the region one compact near-spherical piece.
        Grid<double> noise(shape, 1);
        for (auto& v : noise.data) v = rng.uniform(-1.0, 1.0);
        Grid<double> score = gaussian_smooth(noise, sigma);
        const double peak = max_abs(score);
        if (peak > 0.0) {
            for (auto& v : score.data) v /= peak;
        }
        for (int z = 0; z < nz; ++z) {
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    const double d = std::sqrt(double((x - cx) * (x - cx) + (y - cy) * (y - cy) +
                                                      (z - cz) * (z - cz)));
                    score.data[out.idx(x, y, z)] += 4.0 * (1.0 - d / radius);
                }
            }
        }

        // Rank-select the best-scoring candidates (ties break on index so the
        // result is deterministic), then smooth the indicator and re-select at
        // the same size. The second pass irons out thin fingers of the region
        // without disturbing its volume.
        for (int pass = 0; pass < 2; ++pass) {
            std::vector<std::pair<double, std::size_t>> scored;
            scored.reserve(total);
            for (std::size_t i = 0; i < total; ++i) {
                if (cand[i]) scored.emplace_back(score.data[i], i);
            }
            if (scored.size() < size_each) {
                throw std::logic_error("gen_anatomy: candidate region smaller than structure " +
                                       std::to_string(k));
            }
            std::nth_element(scored.begin(), scored.begin() + (size_each - 1), scored.end(),
                             better);

            std::fill(parent.begin(), parent.end(), 0);
            for (std::size_t i = 0; i < size_each; ++i) parent[scored[i].second] = 1;

            if (pass == 0) {
                Grid<double> ind(shape, 1, 0.0);
                for (std::size_t i = 0; i < total; ++i) ind.data[i] = parent[i] ? 1.0 : 0.0;
                score = gaussian_smooth(ind, 2.5);
            }
        }
        for (std::size_t i = 0; i < total; ++i) {
            if (parent[i]) out.data[i] = uint8_t(k);
        }
    }

    std::vector<std::size_t> count(std::size_t(n_structs) + 1, 0);
    for (uint8_t v : out.data) ++count[v];
    for (int c = 0; c <= n_structs; ++c) {
        if (count[c] == 0) {
            throw std::logic_error("gen_anatomy: class " + std::to_string(c) + " came out empty");
        }
    }
    return out;
}

std::vector<double> default_profile_a(int n_classes) {
    if (n_classes < 2) {
        throw std::invalid_argument("default_profile_a: need at least 2 classes");
    }
    std::vector<double> p(n_classes);
    for (int k = 0; k < n_classes; ++k) p[k] = double(k) / double(n_classes - 1);
    return p;
}

std::vector<double> default_profile_b(int n_classes) {
    // Hand-picked so that bright/dark assignments disagree with profile A:
    // class rank correlation between the two is near zero.
    static const double table[] = {0.05, 0.90, 0.06, 0.70, 0.048, 0.50, 0.85, 0.055, 0.65, 0.08};
    const int max_fg = int(sizeof(table) / sizeof(table[0]));
    if (n_classes < 2 || n_classes > max_fg + 1) {
        throw std::invalid_argument("default_profile_b: supports 2 to " +
                                    std::to_string(max_fg + 1) + " classes, got " +
                                    std::to_string(n_classes));
    }
    std::vector<double> p(n_classes);
    p[0] = 0.30;
    for (int k = 1; k < n_classes; ++k) p[k] = table[k - 1];
    return p;
}

Volume render_modality(const LabelVolume& labels, const std::vector<double>& profile,
                       double noise_sd, double bias_amplitude, uint64_t seed) {
    if (int(profile.size()) != labels.n_classes) {
        throw std::invalid_argument("render_modality: profile has " +
                                    std::to_string(profile.size()) + " entries but labels carry " +
                                    std::to_string(labels.n_classes) + " classes");
    }
    Rng rng(seed);
    Volume out(labels.shape);

    Grid<double> bias(labels.shape, 1, 0.0);
    if (bias_amplitude > 0.0) {
        const int ext_min = std::min({labels.shape[0], labels.shape[1], labels.shape[2]});
        bias = smooth_noise_field(labels.shape, 1, ext_min / 4.0, bias_amplitude, rng);
    }

    for (std::size_t i = 0; i < out.values.data.size(); ++i) {
        out.values.data[i] = profile[labels.data[i]] * (1.0 + bias.data[i]);
    }
    if (noise_sd > 0.0) {
        for (auto& v : out.values.data) v += noise_sd * rng.normal();
    }
    return normalize_intensity(out);
}

Grid<double> smooth_noise_field(Shape3 shape, int channels, double sigma, double max_magnitude,
                                Rng& rng) {
    Grid<double> g(shape, channels);
    for (auto& v : g.data) v = rng.uniform(-1.0, 1.0);
    g = gaussian_smooth(g, sigma);
    const double peak = max_abs(g);
    if (peak > 0.0) {
        const double scale = max_magnitude / peak;
        for (auto& v : g.data) v *= scale;
    }
    return g;
}

std::vector<int> DatasetManifest::split_indices(const std::string& split) const {
    std::vector<int> idx;
    for (int i = 0; i < int(entries.size()); ++i) {
        if (entries[i].split == split) idx.push_back(i);
    }
    return idx;
}

namespace {

std::string subject_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04d", i + 1);
    return buf;
}

// Stationary shear velocity: whole-voxel displacements along one axis whose
// magnitude varies smoothly over the other two axes only. Such a field is
// constant along its own flow, so integrate_svf reproduces it exactly and
// the resulting warp permutes grid voxels (exactly invertible, |J| = 1).
Grid<double> shear_velocity(Shape3 shape, int axis, double sigma, double mag, Rng& rng) {
    Shape3 flat = shape;
    flat[axis] = 1;
    Grid<double> noise(flat, 1);
    for (auto& v : noise.data) v = rng.uniform(-1.0, 1.0);
    const Grid<double> sm = gaussian_smooth(noise, sigma);
    const double peak = max_abs(sm);

    Grid<double> vel(shape, 3, 0.0);
    const int nx = shape[0], ny = shape[1], nz = shape[2];
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const double s = sm.at(0, axis == 0 ? 0 : x, axis == 1 ? 0 : y,
                                       axis == 2 ? 0 : z);
                vel.at(axis, x, y, z) = std::round(s / (peak > 0.0 ? peak : 1.0) * mag);
            }
        }
    }
    return vel;
}

}  // namespace

DatasetManifest gen_dataset(const SynthConfig& cfg) {
    if (cfg.n_train < 2 || cfg.n_test < 2) {
        throw std::invalid_argument("gen_dataset: need at least 2 train and 2 test subjects, got " +
                                    std::to_string(cfg.n_train) + "/" + std::to_string(cfg.n_test));
    }
    if (cfg.out_dir.empty()) {
        throw std::invalid_argument("gen_dataset: out_dir is empty");
    }
    if (cfg.warp_mag < 1.0) {
        throw std::invalid_argument("gen_dataset: warp_mag must be >= 1 voxel, got " +
                                    std::to_string(cfg.warp_mag));
    }
    const int ext_min = std::min({cfg.shape[0], cfg.shape[1], cfg.shape[2]});
    const int mag_i = int(std::ceil(cfg.warp_mag));
    const int margin = std::min(ext_min / 4, std::max(8, mag_i + 2));
    if (mag_i + 2 > margin) {
        throw std::invalid_argument(
            "gen_dataset: warp_mag " + std::to_string(cfg.warp_mag) + " needs margin " +
            std::to_string(mag_i + 2) + " but " + shape_str(cfg.shape) + " only affords " +
            std::to_string(margin) + "; shrink the warp or enlarge the grid");
    }

    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    const fs::path man_path = root / "manifest.json";
    if (fs::exists(man_path) && !cfg.overwrite) {
        throw std::runtime_error("gen_dataset: " + man_path.string() +
                                 " already exists (enable overwrite to replace it)");
    }

    const Rng master(cfg.seed);
    const LabelVolume tmpl = gen_anatomy(master.fork(1).state(), cfg.shape, cfg.n_structs, margin);
    const int n_classes = tmpl.n_classes;
    const auto profile_a = default_profile_a(n_classes);
    const auto profile_b = default_profile_b(n_classes);

    DatasetManifest man;
    man.shape = cfg.shape;
    man.n_classes = n_classes;
    man.root = root.string();

    const int n_total = cfg.n_train + cfg.n_test;
    std::vector<LabelVolume> test_labels;
    for (int i = 0; i < n_total; ++i) {
        SubjectEntry e;
        e.id = subject_id(i);
        e.split = i < cfg.n_train ? "train" : "test";
        Rng vel_rng = master.fork(1000 + i);
        e.seed = vel_rng.state();

        const int axis = vel_rng.uniform_int(3);
        const Grid<double> vel =
            shear_velocity(cfg.shape, axis, cfg.warp_sigma, cfg.warp_mag, vel_rng);
        Grid<double> neg = vel;
        for (auto& v : neg.data) v = -v;
        const Grid<double> fwd = integrate_svf(vel, 7);
        const Grid<double> inv = integrate_svf(neg, 7);
        const LabelVolume labels = warp_labels(tmpl, fwd);

        // Render each modality on the template, then push it through the same
        // field as the labels (linear vs nearest interpolation; identical here
        // because the displacements are whole voxels).
        Volume vol_a = warp_image(render_modality(tmpl, profile_a, cfg.noise_sd,
                                                  cfg.bias_amplitude,
                                                  master.fork(2000 + i).state()),
                                  fwd);
        vol_a.modality_tag = "A";
        Volume vol_b = warp_image(render_modality(tmpl, profile_b, cfg.noise_sd,
                                                  cfg.bias_amplitude,
                                                  master.fork(3000 + i).state()),
                                  fwd);
        vol_b.modality_tag = "B";

        e.vol_a = e.id + "_A.nii.gz";
        e.vol_b = e.id + "_B.nii.gz";
        e.labels = e.id + "_labels.nii.gz";
        e.warp_fwd = e.id + "_fwd.nii.gz";
        e.warp_inv = e.id + "_inv.nii.gz";
        save_volume(vol_a, (root / e.vol_a).string());
        save_volume(vol_b, (root / e.vol_b).string());
        save_labels(labels, (root / e.labels).string());
        save_field(fwd, (root / e.warp_fwd).string());
        save_field(inv, (root / e.warp_inv).string());

        if (e.split == "test") test_labels.push_back(labels);
        man.entries.push_back(std::move(e));
    }

    // Cache the unregistered mean DSC over the fixed test pairing, so later
    // evaluations of an identity model can be checked against it exactly.
    const auto pairs = eval_pairs(int(test_labels.size()), kEvalMaxPairs, kEvalPairSeed);
    double sum = 0.0;
    for (const auto& [a, b] : pairs) {
        sum += dsc(test_labels[a], test_labels[b], n_classes).mean;
    }
    man.initial_dsc = sum / double(pairs.size());

    json j;
    j["version"] = man.version;
    j["shape"] = {cfg.shape[0], cfg.shape[1], cfg.shape[2]};
    j["n_classes"] = n_classes;
    j["initial_dsc"] = man.initial_dsc;
    j["generator"] = {{"seed", cfg.seed},         {"n_train", cfg.n_train},
                      {"n_test", cfg.n_test},     {"n_structs", cfg.n_structs},
                      {"warp_sigma", cfg.warp_sigma}, {"warp_mag", cfg.warp_mag},
                      {"noise_sd", cfg.noise_sd}, {"bias_amplitude", cfg.bias_amplitude}};
    json entries = json::array();
    for (const auto& e : man.entries) {
        entries.push_back({{"id", e.id},
                           {"split", e.split},
                           {"seed", e.seed},
                           {"vol_a", e.vol_a},
                           {"vol_b", e.vol_b},
                           {"labels", e.labels},
                           {"warp_fwd", e.warp_fwd},
                           {"warp_inv", e.warp_inv}});
    }
    j["entries"] = std::move(entries);

    std::ofstream out(man_path);
    if (!out) {
        throw std::runtime_error("gen_dataset: cannot write " + man_path.string());
    }
    out << j.dump(2) << "\n";
    return man;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_manifest: cannot open " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_manifest: " + path + " is not valid JSON: " + e.what());
    }

    DatasetManifest man;
    try {
        man.version = j.at("version").get<int>();
        if (man.version != 1) {
            throw std::runtime_error("load_manifest: unsupported manifest version " +
                                     std::to_string(man.version));
        }
        const auto& s = j.at("shape");
        man.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
        man.n_classes = j.at("n_classes").get<int>();
        man.initial_dsc = j.at("initial_dsc").get<double>();
        for (const auto& je : j.at("entries")) {
            SubjectEntry e;
            e.id = je.at("id").get<std::string>();
            e.split = je.at("split").get<std::string>();
            e.seed = je.at("seed").get<uint64_t>();
            e.vol_a = je.at("vol_a").get<std::string>();
            e.vol_b = je.at("vol_b").get<std::string>();
            e.labels = je.at("labels").get<std::string>();
            e.warp_fwd = je.at("warp_fwd").get<std::string>();
            e.warp_inv = je.at("warp_inv").get<std::string>();
            if (e.split != "train" && e.split != "test") {
                throw std::runtime_error("load_manifest: entry " + e.id + " has unknown split '" +
                                         e.split + "'");
            }
            man.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("load_manifest: " + path + " is missing fields: " + e.what());
    }
    if (man.entries.empty()) {
        throw std::runtime_error("load_manifest: " + path + " lists no subjects");
    }
    man.root = fs::path(path).parent_path().string();
    return man;
}

SubjectData load_subject(const DatasetManifest& m, const SubjectEntry& e) {
    const fs::path root(m.root);
    SubjectData s;
    s.vol_a = load_volume((root / e.vol_a).string());
    s.vol_a.modality_tag = "A";
    s.vol_b = load_volume((root / e.vol_b).string());
    s.vol_b.modality_tag = "B";
    s.labels = load_labels((root / e.labels).string());
    s.labels.n_classes = m.n_classes;
    s.warp_fwd = load_field((root / e.warp_fwd).string());
    s.warp_inv = load_field((root / e.warp_inv).string());
    return s;
}

}  // namespace m2m
