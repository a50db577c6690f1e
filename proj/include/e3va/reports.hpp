#pragma once

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "e3va/profiler.hpp"

namespace e3va {

using json = nlohmann::json;

inline std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// method,backbone,alpha,trainable,total,delta_vs_full_pct
inline std::string count_params_csv(const std::string& backbone,
                                    const std::vector<std::pair<MethodConfig, ParamCount>>& rows,
                                    int64_t full_trainable) {
    std::string out = "method,backbone,alpha,trainable,total,delta_vs_full_pct\n";
    for (const auto& [m, pc] : rows) {
        double delta = full_trainable == 0
                           ? 0.0
                           : 100.0 * (double(pc.trainable) - double(full_trainable)) /
                                 double(full_trainable);
        out += std::string(method_name(m.name)) + "," + backbone + "," +
               std::to_string(m.alpha) + "," + std::to_string(pc.trainable) + "," +
               std::to_string(pc.total) + "," + fmt2(delta) + "\n";
    }
    return out;
}

inline std::string compare_csv(const std::vector<ComparisonRow>& rows) {
    std::string out =
        "method,trainable_params,delta_params_pct,grad_bytes,delta_mem_pct,"
        "step_time_ms,delta_time_pct,n_backbone_grad_nodes\n";
    for (const auto& r : rows)
        out += r.p.method + "," + std::to_string(r.p.trainable_params) + "," +
               fmt2(r.delta_params_pct) + "," + std::to_string(r.p.grad_bytes) + "," +
               fmt2(r.delta_mem_pct) + "," + fmt(r.p.step_time_ms) + "," +
               fmt2(r.delta_time_pct) + "," + std::to_string(r.p.n_backbone_grad_nodes) +
               "\n";
    return out;
}

inline json compare_json(const std::vector<ComparisonRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"method", r.p.method},
                       {"trainable_params", r.p.trainable_params},
                       {"delta_params_pct", r.delta_params_pct},
                       {"grad_bytes", r.p.grad_bytes},
                       {"delta_mem_pct", r.delta_mem_pct},
                       {"step_time_ms", r.p.step_time_ms},
                       {"delta_time_pct", r.delta_time_pct},
                       {"n_backbone_grad_nodes", r.p.n_backbone_grad_nodes}});
    return arr;
}

inline std::string profile_csv(const StepProfile& p) {
    std::string out =
        "method,trainable_params,grad_bytes,act_saved_bytes,n_grad_nodes,"
        "n_backbone_grad_nodes,step_time_ms\n";
    out += p.method + "," + std::to_string(p.trainable_params) + "," +
           std::to_string(p.grad_bytes) + "," + std::to_string(p.act_saved_bytes) + "," +
           std::to_string(p.n_grad_nodes) + "," + std::to_string(p.n_backbone_grad_nodes) +
           "," + fmt(p.step_time_ms) + "\n";
    return out;
}

inline json profile_json(const StepProfile& p) {
    return {{"method", p.method},
            {"trainable_params", p.trainable_params},
            {"grad_bytes", p.grad_bytes},
            {"act_saved_bytes", p.act_saved_bytes},
            {"n_grad_nodes", p.n_grad_nodes},
            {"n_backbone_grad_nodes", p.n_backbone_grad_nodes},
            {"step_time_ms", p.step_time_ms}};
}

inline json train_report_json(const TrainReport& r) {
    return {{"method", r.method},
            {"seed", r.seed},
            {"steps", r.steps},
            {"final_pixel_acc", r.final_pixel_acc},
            {"wall_time_total", r.wall_time_total},
            {"loss_curve", r.loss_curve}};
}

inline std::string loss_curve_csv(const TrainReport& r) {
    std::string out = "step,loss\n";
    for (size_t i = 0; i < r.loss_curve.size(); ++i)
        out += std::to_string(i + 1) + "," + fmt(r.loss_curve[i]) + "\n";
    return out;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out =
        "trainable_reduction,train_fpn_norm,trainable_params,final_loss,pixel_acc\n";
    for (const auto& r : rows)
        out += std::string(r.trainable_reduction ? "true" : "false") + "," +
               (r.train_fpn_norm ? "true" : "false") + "," +
               std::to_string(r.trainable_params) + "," + fmt(r.final_loss) + "," +
               fmt(r.pixel_acc) + "\n";
    return out;
}

inline std::string gradcheck_csv(const GradCheckResult& r) {
    std::string out = "group,coords_checked,max_rel_err,max_abs_err\n";
    for (const auto& g : r.groups)
        out += g.name + "," + std::to_string(g.coords_checked) + "," + fmt(g.max_rel_err) +
               "," + fmt(g.max_abs_err) + "\n";
    return out;
}

}  // namespace e3va
