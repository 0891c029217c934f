#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>

#include "rcbev/tensor.hpp"

namespace rcbev {

/// Flat key-value experiment configuration. Text format, one `key = value`
/// per line: numbers with '.' decimal separator, booleans `true`/`false`,
/// strings in double quotes, `#` starts a comment. Unknown keys are rejected.
struct ExperimentConfig {
    // BEV geometry
    int bev_h = 32;
    int bev_w = 32;
    double bev_res = 1.0;
    int seg_upsample = 2;

    // model widths
    int bev_channels = 8;    // shared camera/radar BEV width entering fusion
    int fuse_channels = 8;
    int head_hidden = 8;
    int seg_hidden = 8;

    // dual-stream radar backbone
    int radar_stages = 2;
    int radar_point_width = 8;  // first-stage output width, doubling per stage
    int radar_tf_width = 16;
    int dmsa_heads = 2;
    int exchange_heads = 2;
    bool include_z = true;
    int sweep_count = 6;

    // RCS scattering (sized for the 1 m/px toy grid: vehicle returns spread
    // 2-4 px so features cover the object center, pedestrians stay sub-pixel)
    double k_norm = 8.0e-3;
    double r_max_px = 4.0;
    int rcs_mlp_out = 8;

    // fusion
    std::string fusion = "camf";  // camf | concat
    int deform_heads = 2;
    int deform_points = 4;

    // synthetic world
    int n_objects = 5;
    double area_extent = 13.0;
    double v_max = 6.0;
    double radar_pts_per_m = 1.5;
    double sigma_az = 0.008;
    double sigma_doppler = 0.05;
    double k_rcs = 1.0;
    double sigma_rcs = 0.5;
    double clutter_rate = 1.0;
    double depth_bias = 3.0;
    double sigma_long = 3.0;
    double sigma_lat = 1.0;
    double depth_jitter = 1.0;
    double drivable_radius = 12.0;

    // training
    int steps1 = 1300;
    int steps2 = 2000;
    double lr = 3e-3;
    double weight_decay = 0.01;
    int n_train_scenes = 144;
    int n_eval_scenes = 40;
    double w_obj = 1.0;
    double w_off = 1.0;
    double w_size = 0.5;
    double w_yaw = 0.5;
    double w_vel = 8.0;
    double vel_scale = 10.0;
    bool train_seg = true;
    double w_seg_vehicle = 400.0;
    double w_seg_drivable = 80.0;
    double w_seg_lane = 200.0;
    double seg_scale = 0.002;
    double view_dropout_prob = 0.15;
    double all_drop_prob = 0.2;
    double radar_noise_train = 0.0;
    bool freeze_camera_stage2 = true;

    // decoding / eval
    double score_thresh = 0.25;
    double nms_radius = 3.0;
    double tp_match_dist = 4.0;
    double track_gate = 2.0;
    int track_max_missed = 3;

    uint64_t seed = 1;
    std::string out_dir = "out";
};

namespace detail {

struct ConfigField {
    const char* name;
    std::variant<int ExperimentConfig::*, double ExperimentConfig::*, bool ExperimentConfig::*,
                 uint64_t ExperimentConfig::*, std::string ExperimentConfig::*>
        member;
};

inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        {"bev_h", &C::bev_h},
        {"bev_w", &C::bev_w},
        {"bev_res", &C::bev_res},
        {"seg_upsample", &C::seg_upsample},
        {"bev_channels", &C::bev_channels},
        {"fuse_channels", &C::fuse_channels},
        {"head_hidden", &C::head_hidden},
        {"seg_hidden", &C::seg_hidden},
        {"radar_stages", &C::radar_stages},
        {"radar_point_width", &C::radar_point_width},
        {"radar_tf_width", &C::radar_tf_width},
        {"dmsa_heads", &C::dmsa_heads},
        {"exchange_heads", &C::exchange_heads},
        {"include_z", &C::include_z},
        {"sweep_count", &C::sweep_count},
        {"k_norm", &C::k_norm},
        {"r_max_px", &C::r_max_px},
        {"rcs_mlp_out", &C::rcs_mlp_out},
        {"fusion", &C::fusion},
        {"deform_heads", &C::deform_heads},
        {"deform_points", &C::deform_points},
        {"n_objects", &C::n_objects},
        {"area_extent", &C::area_extent},
        {"v_max", &C::v_max},
        {"radar_pts_per_m", &C::radar_pts_per_m},
        {"sigma_az", &C::sigma_az},
        {"sigma_doppler", &C::sigma_doppler},
        {"k_rcs", &C::k_rcs},
        {"sigma_rcs", &C::sigma_rcs},
        {"clutter_rate", &C::clutter_rate},
        {"depth_bias", &C::depth_bias},
        {"sigma_long", &C::sigma_long},
        {"sigma_lat", &C::sigma_lat},
        {"depth_jitter", &C::depth_jitter},
        {"drivable_radius", &C::drivable_radius},
        {"steps1", &C::steps1},
        {"steps2", &C::steps2},
        {"lr", &C::lr},
        {"weight_decay", &C::weight_decay},
        {"n_train_scenes", &C::n_train_scenes},
        {"n_eval_scenes", &C::n_eval_scenes},
        {"w_obj", &C::w_obj},
        {"w_off", &C::w_off},
        {"w_size", &C::w_size},
        {"w_yaw", &C::w_yaw},
        {"w_vel", &C::w_vel},
        {"vel_scale", &C::vel_scale},
        {"train_seg", &C::train_seg},
        {"w_seg_vehicle", &C::w_seg_vehicle},
        {"w_seg_drivable", &C::w_seg_drivable},
        {"w_seg_lane", &C::w_seg_lane},
        {"seg_scale", &C::seg_scale},
        {"view_dropout_prob", &C::view_dropout_prob},
        {"all_drop_prob", &C::all_drop_prob},
        {"radar_noise_train", &C::radar_noise_train},
        {"freeze_camera_stage2", &C::freeze_camera_stage2},
        {"score_thresh", &C::score_thresh},
        {"nms_radius", &C::nms_radius},
        {"tp_match_dist", &C::tp_match_dist},
        {"track_gate", &C::track_gate},
        {"track_max_missed", &C::track_max_missed},
        {"seed", &C::seed},
        {"out_dir", &C::out_dir},
    };
    return fields;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : detail::config_fields()) {
        os << f.name << " = ";
        std::visit(
            [&](auto member) {
                using T = std::decay_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, bool>) {
                    os << (cfg.*member ? "true" : "false");
                } else if constexpr (std::is_same_v<T, std::string>) {
                    os << '"' << cfg.*member << '"';
                } else if constexpr (std::is_same_v<T, double>) {
                    os << detail::format_double(cfg.*member);
                } else {
                    os << cfg.*member;
                }
            },
            f.member);
        os << "\n";
    }
    return os.str();
}

inline ExperimentConfig parse_config(std::istream& is) {
    ExperimentConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // trim
        auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
        while (!line.empty() && is_ws(line.back())) line.pop_back();
        size_t start = 0;
        while (start < line.size() && is_ws(line[start])) ++start;
        if (start >= line.size()) continue;
        const auto eq = line.find('=', start);
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && is_ws(key.back())) key.pop_back();
        std::string value = line.substr(eq + 1);
        size_t vs = 0;
        while (vs < value.size() && is_ws(value[vs])) ++vs;
        value.erase(0, vs);

        bool found = false;
        for (const auto& f : detail::config_fields()) {
            if (key != f.name) continue;
            found = true;
            std::visit(
                [&](auto member) {
                    using T = std::decay_t<decltype(cfg.*member)>;
                    if constexpr (std::is_same_v<T, bool>) {
                        if (value == "true") {
                            cfg.*member = true;
                        } else if (value == "false") {
                            cfg.*member = false;
                        } else {
                            throw std::runtime_error("config: bad bool for " + key);
                        }
                    } else if constexpr (std::is_same_v<T, std::string>) {
                        if (value.size() < 2 || value.front() != '"' || value.back() != '"') {
                            throw std::runtime_error("config: string value for " + key +
                                                     " must be double-quoted");
                        }
                        cfg.*member = value.substr(1, value.size() - 2);
                    } else {
                        char* end = nullptr;
                        const double d = std::strtod(value.c_str(), &end);
                        if (end == value.c_str() || *end != '\0') {
                            throw std::runtime_error("config: bad number for " + key);
                        }
                        cfg.*member = static_cast<T>(d);
                    }
                },
                f.member);
            break;
        }
        if (!found) throw std::runtime_error("config: unknown key '" + key + "'");
    }
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    return parse_config(f);
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return serialize_config(a) == serialize_config(b);
}

/// FNV-1a hash of the canonical serialization, recorded in run manifests.
inline uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string s = serialize_config(cfg);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace rcbev
