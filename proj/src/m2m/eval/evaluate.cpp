#include "m2m/eval/evaluate.h"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "m2m/transform/field.h"

namespace m2m {

std::string pair_key(const std::string& src_id, const std::string& dst_id) {
    return src_id + ":" + dst_id;
}

MetricsRecord evaluate_fields(const FieldFn& fields, const DatasetManifest& man,
                              const EvalConfig& cfg) {
    const std::vector<int> idx = man.split_indices(cfg.split);
    if (idx.size() < 2) {
        throw std::invalid_argument("evaluate_fields: split '" + cfg.split + "' has " +
                                    std::to_string(idx.size()) +
                                    " subjects; need at least 2 for cross-subject pairs");
    }

    std::vector<SubjectData> subj;
    subj.reserve(idx.size());
    for (int t : idx) subj.push_back(load_subject(man, man.entries[t]));

    const auto pairs = eval_pairs(int(idx.size()), cfg.max_pairs, cfg.seed);

    MetricsRecord rec;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rec.loss_total = rec.loss_sim = rec.loss_reg = rec.loss_gcc = nan;
    std::vector<double> cls_sum(std::size_t(man.n_classes), 0.0);
    std::vector<int> cls_n(std::size_t(man.n_classes), 0);
    double dsc_sum = 0.0, negj_sum = 0.0, lncc_sum = 0.0;

    for (const auto& [a, b] : pairs) {
        const SubjectData& src = subj[std::size_t(a)];
        const SubjectData& dst = subj[std::size_t(b)];
        const Grid<double> field =
            fields(src, dst, man.entries[std::size_t(idx[std::size_t(a)])],
                   man.entries[std::size_t(idx[std::size_t(b)])]);
        if (field.shape != man.shape || field.channels != 3) {
            throw std::invalid_argument("evaluate_fields: provider returned a " +
                                        shape_str(field.shape) + " field for a " +
                                        shape_str(man.shape) + " dataset");
        }

        const DscResult r = dsc(warp_labels(src.labels, field), dst.labels, man.n_classes);
        dsc_sum += r.mean;
        for (int c = 1; c < man.n_classes; ++c) {
            if (!std::isnan(r.per_class[std::size_t(c)])) {
                cls_sum[std::size_t(c)] += r.per_class[std::size_t(c)];
                ++cls_n[std::size_t(c)];
            }
        }
        negj_sum += neg_jacobian_fraction(field);
        lncc_sum += lncc(warp_image(src.vol_a, field), dst.vol_b, cfg.metric.radius,
                         cfg.metric.eps);
    }

    const double n = double(pairs.size());
    rec.mean_dsc = dsc_sum / n;
    rec.neg_jacobian_pct = 100.0 * negj_sum / n;
    rec.lncc_mm = lncc_sum / n;
    rec.per_class_dsc.assign(std::size_t(man.n_classes), nan);
    for (int c = 1; c < man.n_classes; ++c) {
        if (cls_n[std::size_t(c)] > 0) {
            rec.per_class_dsc[std::size_t(c)] = cls_sum[std::size_t(c)] / cls_n[std::size_t(c)];
        }
    }
    return rec;
}

MetricsRecord evaluate_model(const ModelParams& params, const DatasetManifest& man,
                             const EvalConfig& cfg) {
    if (params.kind == BackendKind::Amortized) {
        return evaluate_fields(
            [&params](const SubjectData& src, const SubjectData& dst, const SubjectEntry&,
                      const SubjectEntry&) { return predict_field(params, src.vol_a, dst.vol_b); },
            man, cfg);
    }
    return evaluate_fields(
        [&params, &man](const SubjectData&, const SubjectData&, const SubjectEntry& src_e,
                        const SubjectEntry& dst_e) {
            const std::string key = pair_key(src_e.id, dst_e.id);
            if (!bank_has(params, key)) return identity_field(man.shape);
            const Grid<float>& f = bank_get(params, key);
            Grid<double> out(f.shape, f.channels);
            for (std::size_t i = 0; i < f.data.size(); ++i) out.data[i] = double(f.data[i]);
            return out;
        },
        man, cfg);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

double parse_cell(const std::string& cell, const std::string& path, int line_no) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(cell, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != cell.size() || cell.empty()) {
        throw std::runtime_error("diag_curves: " + path + " line " + std::to_string(line_no) +
                                 ": cell '" + cell + "' is not a number");
    }
    return v;
}

}  // namespace

DiagResult diag_curves(const std::string& metrics_csv, const std::string& derived_csv,
                       const std::string& summary_json) {
    std::ifstream in(metrics_csv);
    if (!in) {
        throw std::runtime_error("diag_curves: cannot open " + metrics_csv);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("diag_curves: " + metrics_csv + " is empty");
    }

    const auto header = split_csv_line(line);
    int col_step = -1, col_lncc = -1, col_dsc = -1;
    for (int i = 0; i < int(header.size()); ++i) {
        if (header[std::size_t(i)] == "step") col_step = i;
        if (header[std::size_t(i)] == "eval_lncc_mm") col_lncc = i;
        if (header[std::size_t(i)] == "eval_dsc") col_dsc = i;
    }
    if (col_step < 0 || col_lncc < 0 || col_dsc < 0) {
        throw std::runtime_error("diag_curves: " + metrics_csv +
                                 " must carry step, eval_dsc, and eval_lncc_mm columns");
    }

    DiagResult res;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (int(cells.size()) != int(header.size())) {
            throw std::runtime_error("diag_curves: " + metrics_csv + " line " +
                                     std::to_string(line_no) + " has " +
                                     std::to_string(cells.size()) + " cells, header has " +
                                     std::to_string(header.size()));
        }
        // Rows without evaluation values (plain training steps) are skipped.
        if (cells[std::size_t(col_dsc)].empty() || cells[std::size_t(col_lncc)].empty()) continue;
        DiagRow row;
        row.step = parse_cell(cells[std::size_t(col_step)], metrics_csv, line_no);
        row.lncc_mm = parse_cell(cells[std::size_t(col_lncc)], metrics_csv, line_no);
        row.dsc = parse_cell(cells[std::size_t(col_dsc)], metrics_csv, line_no);
        res.rows.push_back(row);
    }
    if (res.rows.empty()) {
        throw std::runtime_error("diag_curves: " + metrics_csv + " holds no evaluation rows");
    }

    res.initial_dsc = res.rows.front().dsc;
    res.final_dsc = res.rows.back().dsc;
    res.delta_dsc = res.final_dsc - res.initial_dsc;
    std::vector<double> xs, ys;
    for (auto& row : res.rows) {
        row.delta_dsc = row.dsc - res.initial_dsc;
        xs.push_back(row.lncc_mm);
        ys.push_back(row.dsc);
    }
    res.spearman_lncc_dsc = spearman(xs, ys, res.degenerate);

    if (!derived_csv.empty()) {
        std::ofstream out(derived_csv);
        if (!out) {
            throw std::runtime_error("diag_curves: cannot write " + derived_csv);
        }
        out << "step,lncc_mm,dsc,delta_dsc_vs_initial\n";
        out.precision(17);
        for (const auto& row : res.rows) {
            out << row.step << "," << row.lncc_mm << "," << row.dsc << "," << row.delta_dsc
                << "\n";
        }
    }
    if (!summary_json.empty()) {
        nlohmann::json j;
        j["rows"] = res.rows.size();
        j["spearman_lncc_dsc"] = res.spearman_lncc_dsc;
        j["degenerate"] = res.degenerate;
        j["initial_dsc"] = res.initial_dsc;
        j["final_dsc"] = res.final_dsc;
        j["delta_dsc"] = res.delta_dsc;
        std::ofstream out(summary_json);
        if (!out) {
            throw std::runtime_error("diag_curves: cannot write " + summary_json);
        }
        out << j.dump(2) << "\n";
    }
    return res;
}

}  // namespace m2m
