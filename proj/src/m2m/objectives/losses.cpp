#include "m2m/objectives/losses.h"

#include <stdexcept>

namespace m2m {

SimMetric parse_sim_metric(const std::string& name) {
    if (name == "lncc") return SimMetric::Lncc;
    if (name == "lncc_sq") return SimMetric::LnccSq;
    throw std::invalid_argument("unknown similarity metric '" + name +
                                "' (expected lncc or lncc_sq)");
}

const char* sim_metric_name(SimMetric m) {
    return m == SimMetric::Lncc ? "lncc" : "lncc_sq";
}

double LossBreakdown::sim_sum() const {
    double s = 0.0;
    for (const auto& [name, v] : sim_terms) s += v;
    return s;
}

namespace {

// Local correlation map shared by lncc and lncc_sq. Every elementwise product
// is commutative in its operands, so swapping a and b produces bit-identical
// results.
template <typename T>
typename Tape<T>::NodeId build_local_corr(Tape<T>& t, typename Tape<T>::NodeId a,
                                          typename Tape<T>::NodeId b, int radius, double eps) {
    auto mean_a = t.box_mean(a, radius);
    auto mean_b = t.box_mean(b, radius);
    auto mean_ab = t.box_mean(t.mul(a, b), radius);
    auto mean_a2 = t.box_mean(t.square(a), radius);
    auto mean_b2 = t.box_mean(t.square(b), radius);
    auto cov = t.sub(mean_ab, t.mul(mean_a, mean_b));
    auto var_a = t.sub(mean_a2, t.square(mean_a));
    auto var_b = t.sub(mean_b2, t.square(mean_b));
    auto denom = t.mul(t.sqrt_eps(var_a, eps), t.sqrt_eps(var_b, eps));
    return t.div_eps(cov, denom, 0.0);
}

}  // namespace

template <typename T>
typename Tape<T>::NodeId build_lncc(Tape<T>& t, typename Tape<T>::NodeId a,
                                    typename Tape<T>::NodeId b, int radius, double eps) {
    return t.reduce_mean(build_local_corr(t, a, b, radius, eps));
}

template <typename T>
typename Tape<T>::NodeId build_lncc_sq(Tape<T>& t, typename Tape<T>::NodeId a,
                                       typename Tape<T>::NodeId b, int radius, double eps) {
    return t.reduce_mean(t.square(build_local_corr(t, a, b, radius, eps)));
}

template <typename T>
typename Tape<T>::NodeId build_sim_loss(Tape<T>& t, typename Tape<T>::NodeId a,
                                        typename Tape<T>::NodeId b, const MetricCfg& cfg) {
    auto metric = cfg.metric == SimMetric::Lncc ? build_lncc(t, a, b, cfg.radius, cfg.eps)
                                                : build_lncc_sq(t, a, b, cfg.radius, cfg.eps);
    return t.sub(t.constant_scalar(T(1)), metric);
}

template <typename T>
typename Tape<T>::NodeId build_diffusion(Tape<T>& t, typename Tape<T>::NodeId field) {
    return t.reduce_mean(t.square(t.spatial_gradient(field)));
}

template <typename T>
typename Tape<T>::NodeId build_compose(Tape<T>& t, typename Tape<T>::NodeId outer,
                                       typename Tape<T>::NodeId inner) {
    return t.add(inner, t.warp_linear(outer, inner));
}

template <typename T>
typename Tape<T>::NodeId build_compose_chain(Tape<T>& t,
                                             const std::vector<typename Tape<T>::NodeId>& chain) {
    if (chain.empty()) throw std::invalid_argument("compose chain must not be empty");
    auto result = chain.back();
    for (int i = int(chain.size()) - 2; i >= 0; --i) result = build_compose(t, chain[i], result);
    return result;
}

template <typename T>
typename Tape<T>::NodeId build_jacobian_penalty(Tape<T>& t,
                                                const std::vector<typename Tape<T>::NodeId>& chain) {
    auto u_total = build_compose_chain(t, chain);
    const Shape3 sh = t.value(u_total).shape;
    if (sh[0] < 3 || sh[1] < 3 || sh[2] < 3)
        throw std::invalid_argument("jacobian penalty needs at least 3 voxels per axis, got " +
                                    shape_str(sh));
    Grid<T> mask(sh, 9, T(0));
    for (int c = 0; c < 9; ++c) {
        T* m = mask.channel(c);
        for (int z = 1; z < sh[2] - 1; ++z)
            for (int y = 1; y < sh[1] - 1; ++y)
                for (int x = 1; x < sh[0] - 1; ++x) m[mask.vidx(x, y, z)] = T(1);
    }
    double n_interior = double(sh[0] - 2) * (sh[1] - 2) * (sh[2] - 2);
    auto sq = t.square(t.spatial_gradient(u_total));
    auto masked = t.mul(sq, t.leaf(std::move(mask), false));
    return t.scalar_mul(t.reduce_sum(masked), 1.0 / n_interior);
}

template <typename T>
M2mTermIds build_m2m_terms(Tape<T>& t, typename Tape<T>::NodeId S, typename Tape<T>::NodeId Tv,
                           typename Tape<T>::NodeId Sp, typename Tape<T>::NodeId Tp,
                           typename Tape<T>::NodeId f_st, typename Tape<T>::NodeId f_tsp,
                           typename Tape<T>::NodeId f_sptp, typename Tape<T>::NodeId f_tps,
                           const MetricCfg& cfg) {
    M2mTermIds ids{};
    ids.s_sp = build_sim_loss(t, t.warp_linear(S, build_compose_chain(t, {f_st, f_tsp})), Sp, cfg);
    ids.sp_s = build_sim_loss(t, t.warp_linear(Sp, build_compose_chain(t, {f_sptp, f_tps})), S, cfg);
    ids.t_tp = build_sim_loss(t, t.warp_linear(Tv, build_compose_chain(t, {f_tsp, f_sptp})), Tp, cfg);
    ids.tp_t = build_sim_loss(t, t.warp_linear(Tp, build_compose_chain(t, {f_tps, f_st})), Tv, cfg);
    return ids;
}

template typename Tape<float>::NodeId build_lncc<float>(Tape<float>&, int, int, int, double);
template typename Tape<double>::NodeId build_lncc<double>(Tape<double>&, int, int, int, double);
template typename Tape<float>::NodeId build_lncc_sq<float>(Tape<float>&, int, int, int, double);
template typename Tape<double>::NodeId build_lncc_sq<double>(Tape<double>&, int, int, int, double);
template typename Tape<float>::NodeId build_sim_loss<float>(Tape<float>&, int, int,
                                                            const MetricCfg&);
template typename Tape<double>::NodeId build_sim_loss<double>(Tape<double>&, int, int,
                                                              const MetricCfg&);
template typename Tape<float>::NodeId build_diffusion<float>(Tape<float>&, int);
template typename Tape<double>::NodeId build_diffusion<double>(Tape<double>&, int);
template typename Tape<float>::NodeId build_compose<float>(Tape<float>&, int, int);
template typename Tape<double>::NodeId build_compose<double>(Tape<double>&, int, int);
template typename Tape<float>::NodeId build_compose_chain<float>(Tape<float>&,
                                                                 const std::vector<int>&);
template typename Tape<double>::NodeId build_compose_chain<double>(Tape<double>&,
                                                                   const std::vector<int>&);
template typename Tape<float>::NodeId build_jacobian_penalty<float>(Tape<float>&,
                                                                    const std::vector<int>&);
template typename Tape<double>::NodeId build_jacobian_penalty<double>(Tape<double>&,
                                                                      const std::vector<int>&);
template M2mTermIds build_m2m_terms<float>(Tape<float>&, int, int, int, int, int, int, int, int,
                                           const MetricCfg&);
template M2mTermIds build_m2m_terms<double>(Tape<double>&, int, int, int, int, int, int, int, int,
                                            const MetricCfg&);

namespace {

void require_same_shape(const Volume& a, const Volume& b, const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace

double lncc(const Volume& a, const Volume& b, int radius, double eps) {
    require_same_shape(a, b, "lncc");
    Tape<double> t;
    auto la = t.leaf(a.values, false);
    auto lb = t.leaf(b.values, false);
    return t.forward(build_lncc(t, la, lb, radius, eps));
}

double lncc_sq(const Volume& a, const Volume& b, int radius, double eps) {
    require_same_shape(a, b, "lncc_sq");
    Tape<double> t;
    auto la = t.leaf(a.values, false);
    auto lb = t.leaf(b.values, false);
    return t.forward(build_lncc_sq(t, la, lb, radius, eps));
}

double sim_loss(const Volume& a, const Volume& b, const MetricCfg& cfg) {
    require_same_shape(a, b, "sim_loss");
    Tape<double> t;
    auto la = t.leaf(a.values, false);
    auto lb = t.leaf(b.values, false);
    return t.forward(build_sim_loss(t, la, lb, cfg));
}

double diffusion_reg(const Grid<double>& u) {
    Tape<double> t;
    return t.forward(build_diffusion(t, t.leaf(u, false)));
}

double gradicon_reg(const Grid<double>& f_st, const Grid<double>& f_ts) {
    Tape<double> t;
    auto a = t.leaf(f_st, false);
    auto b = t.leaf(f_ts, false);
    return t.forward(build_jacobian_penalty(t, {a, b}));
}

double gradcycon(const Grid<double>& f_st, const Grid<double>& f_tsp,
                 const Grid<double>* f_sptp, const Grid<double>& f_tps) {
    Tape<double> t;
    auto a = t.leaf(f_st, false);
    auto b = t.leaf(f_tsp, false);
    auto c = f_sptp ? t.leaf(*f_sptp, false) : t.leaf(Grid<double>(f_st.shape, 3, 0.0), false);
    auto d = t.leaf(f_tps, false);
    return t.forward(build_jacobian_penalty(t, {a, b, c, d}));
}

M2mTerms m2m_loss(const Volume& S, const Volume& Tv, const Volume& Sp, const Volume& Tp,
                  const Grid<double>& f_st, const Grid<double>& f_tsp,
                  const Grid<double>* f_sptp, const Grid<double>& f_tps, const MetricCfg& cfg) {
    if (S.modality_tag != Sp.modality_tag || Tv.modality_tag != Tp.modality_tag ||
        S.modality_tag == Tv.modality_tag)
        throw std::invalid_argument(
            "m2m_loss: modality tags must alternate (S/S' one modality, T/T' another), got S='" +
            S.modality_tag + "' T='" + Tv.modality_tag + "' S'='" + Sp.modality_tag + "' T'='" +
            Tp.modality_tag + "'");
    Tape<double> t;
    auto s = t.leaf(S.values, false);
    auto tv = t.leaf(Tv.values, false);
    auto sp = t.leaf(Sp.values, false);
    auto tp = t.leaf(Tp.values, false);
    auto a = t.leaf(f_st, false);
    auto b = t.leaf(f_tsp, false);
    auto c = f_sptp ? t.leaf(*f_sptp, false) : t.leaf(Grid<double>(f_st.shape, 3, 0.0), false);
    auto d = t.leaf(f_tps, false);
    M2mTermIds ids = build_m2m_terms(t, s, tv, sp, tp, a, b, c, d, cfg);
    auto root = t.add(t.add(ids.s_sp, ids.sp_s), t.add(ids.t_tp, ids.tp_t));
    t.forward(root);
    M2mTerms terms;
    terms.s_sp = t.value(ids.s_sp).data[0];
    terms.sp_s = t.value(ids.sp_s).data[0];
    terms.t_tp = t.value(ids.t_tp).data[0];
    terms.tp_t = t.value(ids.tp_t).data[0];
    return terms;
}

LossBreakdown conventional_loss(const Volume& S, const Volume& Tv, const Grid<double>& f_st,
                                double lambda_reg, const MetricCfg& cfg) {
    require_same_shape(S, Tv, "conventional_loss");
    Tape<double> t;
    auto s = t.leaf(S.values, false);
    auto tv = t.leaf(Tv.values, false);
    auto f = t.leaf(f_st, false);
    auto sim = build_sim_loss(t, t.warp_linear(s, f), tv, cfg);
    auto reg = build_diffusion(t, f);
    auto root = t.add(sim, t.scalar_mul(reg, lambda_reg));
    t.forward(root);
    return final_loss({{"sim", t.value(sim).data[0]}}, t.value(reg).data[0], 0.0, lambda_reg, 0.0);
}

LossBreakdown final_loss(std::vector<std::pair<std::string, double>> sim_terms, double reg_term,
                         double gcc_term, double lambda_reg, double lambda_gcc) {
    if (lambda_reg < 0.0 || lambda_gcc < 0.0)
        throw std::invalid_argument("loss weights must be non-negative");
    LossBreakdown out;
    out.sim_terms = std::move(sim_terms);
    out.reg_term = reg_term;
    out.gcc_term = gcc_term;
    out.lambda_reg = lambda_reg;
    out.lambda_gcc = lambda_gcc;
    out.total = out.sim_sum() + lambda_reg * reg_term + lambda_gcc * gcc_term;
    return out;
}

}  // namespace m2m
