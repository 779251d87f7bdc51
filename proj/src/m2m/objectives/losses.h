#pragma once

#include <string>
#include <utility>
#include <vector>

#include "m2m/core/volume.h"
#include "m2m/tape/tape.h"

namespace m2m {

enum class SimMetric { Lncc, LnccSq };

SimMetric parse_sim_metric(const std::string& name);
const char* sim_metric_name(SimMetric m);

struct MetricCfg {
    SimMetric metric = SimMetric::Lncc;
    int radius = 2;
    double eps = 1e-5;
};

struct LossBreakdown {
    std::vector<std::pair<std::string, double>> sim_terms;
    double reg_term = 0.0;
    double gcc_term = 0.0;
    double lambda_reg = 0.0;
    double lambda_gcc = 0.0;
    double total = 0.0;

    double sim_sum() const;
};

// ---- graph builders ---------------------------------------------------
// All objectives are expressed in the tape's grid primitives so one
// backward pass differentiates any of them.

template <typename T>
typename Tape<T>::NodeId build_lncc(Tape<T>& t, typename Tape<T>::NodeId a,
                                    typename Tape<T>::NodeId b, int radius, double eps);

template <typename T>
typename Tape<T>::NodeId build_lncc_sq(Tape<T>& t, typename Tape<T>::NodeId a,
                                       typename Tape<T>::NodeId b, int radius, double eps);

// 1 - metric(a, b).
template <typename T>
typename Tape<T>::NodeId build_sim_loss(Tape<T>& t, typename Tape<T>::NodeId a,
                                        typename Tape<T>::NodeId b, const MetricCfg& cfg);

// Mean over voxels, components and axes of squared displacement derivatives.
template <typename T>
typename Tape<T>::NodeId build_diffusion(Tape<T>& t, typename Tape<T>::NodeId field);

// Phi_outer o Phi_inner as a graph: u = u_inner + warp(u_outer, u_inner).
template <typename T>
typename Tape<T>::NodeId build_compose(Tape<T>& t, typename Tape<T>::NodeId outer,
                                       typename Tape<T>::NodeId inner);

// Right fold of build_compose over the chain, outermost first:
// {a, b, c} -> Phi_a o Phi_b o Phi_c.
template <typename T>
typename Tape<T>::NodeId build_compose_chain(Tape<T>& t,
                                             const std::vector<typename Tape<T>::NodeId>& chain);

// Mean over interior voxels (1-voxel margin excluded) of the squared
// Frobenius norm of grad(composed Phi) - I, which equals |grad u_total|_F^2.
// With a 2-link chain this is the inverse-consistency penalty; with a 4-link
// chain the cycle-consistency penalty.
template <typename T>
typename Tape<T>::NodeId build_jacobian_penalty(Tape<T>& t,
                                                const std::vector<typename Tape<T>::NodeId>& chain);

struct M2mTermIds {
    int s_sp, sp_s, t_tp, tp_t;
};

// The four cyclic mono-modal similarity terms. Pass the identity (zero-leaf)
// field for `f_sptp` in the pre-aligned-bridge mode.
template <typename T>
M2mTermIds build_m2m_terms(Tape<T>& t, typename Tape<T>::NodeId S, typename Tape<T>::NodeId Tv,
                           typename Tape<T>::NodeId Sp, typename Tape<T>::NodeId Tp,
                           typename Tape<T>::NodeId f_st, typename Tape<T>::NodeId f_tsp,
                           typename Tape<T>::NodeId f_sptp, typename Tape<T>::NodeId f_tps,
                           const MetricCfg& cfg);

// ---- eager evaluation on volumes/fields (double precision) ------------

double lncc(const Volume& a, const Volume& b, int radius = 2, double eps = 1e-5);
double lncc_sq(const Volume& a, const Volume& b, int radius = 2, double eps = 1e-5);
double sim_loss(const Volume& a, const Volume& b, const MetricCfg& cfg);
double diffusion_reg(const Grid<double>& u);
double gradicon_reg(const Grid<double>& f_st, const Grid<double>& f_ts);
// f_sptp == nullptr means the pre-aligned bridge (identity) form.
double gradcycon(const Grid<double>& f_st, const Grid<double>& f_tsp,
                 const Grid<double>* f_sptp, const Grid<double>& f_tps);

struct M2mTerms {
    double s_sp = 0.0, sp_s = 0.0, t_tp = 0.0, tp_t = 0.0;
    double sum() const { return s_sp + sp_s + t_tp + tp_t; }
};

// Requires matching mono-modal tags: S/S' share a modality, T/T' share a
// different one; throws otherwise.
M2mTerms m2m_loss(const Volume& S, const Volume& Tv, const Volume& Sp, const Volume& Tp,
                  const Grid<double>& f_st, const Grid<double>& f_tsp,
                  const Grid<double>* f_sptp, const Grid<double>& f_tps, const MetricCfg& cfg);

LossBreakdown conventional_loss(const Volume& S, const Volume& Tv, const Grid<double>& f_st,
                                double lambda_reg, const MetricCfg& cfg);

LossBreakdown final_loss(std::vector<std::pair<std::string, double>> sim_terms, double reg_term,
                         double gcc_term, double lambda_reg, double lambda_gcc);

}  // namespace m2m
