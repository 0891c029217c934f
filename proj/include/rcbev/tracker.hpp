#pragma once

#include <algorithm>

#include "rcbev/heads.hpp"

namespace rcbev {

struct Track {
    int id = -1;
    Detection last;
    int age = 0;     // frames since birth
    int missed = 0;  // consecutive frames without a match
    std::vector<Detection> history;
};

struct TrackerParams {
    double gate_m = 2.0;
    int max_missed = 3;
};

/// Velocity-compensated greedy matching: every track's center is advanced by
/// its velocity, all (track, detection) pairs inside the gate are sorted by
/// compensated distance (ties broken by track id, then detection index) and
/// matched greedily. Unmatched detections start new tracks; unmatched tracks
/// age out after max_missed frames.
inline std::vector<Track> greedy_track(const std::vector<Track>& prev,
                                       const std::vector<Detection>& dets, double dt,
                                       const TrackerParams& params, int* next_id) {
    if (!(dt > 0.0)) throw std::invalid_argument("greedy_track: dt must be positive");
    const int nt = static_cast<int>(prev.size());
    const int nd = static_cast<int>(dets.size());

    struct Pair {
        double dist;
        int track_idx;
        int det_idx;
    };
    std::vector<Pair> pairs;
    for (int t = 0; t < nt; ++t) {
        const Detection& lt = prev[static_cast<size_t>(t)].last;
        const double px = lt.x + lt.vx * dt;
        const double py = lt.y + lt.vy * dt;
        for (int d = 0; d < nd; ++d) {
            if (dets[static_cast<size_t>(d)].class_id != lt.class_id) continue;
            const double dist = std::hypot(dets[static_cast<size_t>(d)].x - px,
                                           dets[static_cast<size_t>(d)].y - py);
            if (dist < params.gate_m) pairs.push_back({dist, t, d});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [&](const Pair& a, const Pair& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        const int ida = prev[static_cast<size_t>(a.track_idx)].id;
        const int idb = prev[static_cast<size_t>(b.track_idx)].id;
        if (ida != idb) return ida < idb;
        return a.det_idx < b.det_idx;
    });

    std::vector<int> track_match(static_cast<size_t>(nt), -1);
    std::vector<int> det_match(static_cast<size_t>(nd), -1);
    for (const Pair& p : pairs) {
        if (track_match[static_cast<size_t>(p.track_idx)] >= 0 ||
            det_match[static_cast<size_t>(p.det_idx)] >= 0) {
            continue;
        }
        track_match[static_cast<size_t>(p.track_idx)] = p.det_idx;
        det_match[static_cast<size_t>(p.det_idx)] = p.track_idx;
    }

    std::vector<Track> out;
    for (int t = 0; t < nt; ++t) {
        Track tr = prev[static_cast<size_t>(t)];
        tr.age++;
        if (track_match[static_cast<size_t>(t)] >= 0) {
            tr.last = dets[static_cast<size_t>(track_match[static_cast<size_t>(t)])];
            tr.missed = 0;
            tr.history.push_back(tr.last);
            out.push_back(std::move(tr));
        } else {
            tr.missed++;
            if (tr.missed < params.max_missed) out.push_back(std::move(tr));
        }
    }
    for (int d = 0; d < nd; ++d) {
        if (det_match[static_cast<size_t>(d)] >= 0) continue;
        Track tr;
        tr.id = (*next_id)++;
        tr.last = dets[static_cast<size_t>(d)];
        tr.age = 1;
        tr.missed = 0;
        tr.history.push_back(tr.last);
        out.push_back(std::move(tr));
    }
    return out;
}

inline void write_tracks_jsonl(const std::vector<Track>& tracks, double timestamp, std::ostream& os) {
    for (const auto& t : tracks) {
        nlohmann::json row = detection_to_json(t.last);
        row["track_id"] = t.id;
        row["age"] = t.age;
        row["missed"] = t.missed;
        row["t"] = timestamp;
        os << row.dump() << "\n";
    }
}

}  // namespace rcbev
