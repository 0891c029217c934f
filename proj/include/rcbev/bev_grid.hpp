#pragma once

#include <fstream>
#include <string>

#include "rcbev/tensor.hpp"

#include "json.hpp"

namespace rcbev {

/// H x W x C feature raster with metric resolution. `origin` is the world
/// coordinate of the CENTER of pixel (0,0); x maps to columns, y to rows.
struct BEVGrid {
    int height = 0;
    int width = 0;
    double resolution = 1.0;  // meters per pixel
    double origin_x = 0.0;
    double origin_y = 0.0;
    Tensor data;  // (C,H,W)

    BEVGrid() = default;
    BEVGrid(int h, int w, double res, double ox, double oy, int channels)
        : height(h), width(w), resolution(res), origin_x(ox), origin_y(oy),
          data(Tensor::zeros({channels, h, w})) {
        if (h < 1 || w < 1 || !(res > 0.0)) throw std::invalid_argument("BEVGrid: bad geometry");
    }

    /// Grid centered on the ego vehicle.
    static BEVGrid centered(int h, int w, double res, int channels) {
        return BEVGrid(h, w, res, -0.5 * res * (w - 1), -0.5 * res * (h - 1), channels);
    }

    int channels() const { return data.dim(0); }

    /// World meters -> continuous pixel coordinates (px: column, py: row).
    std::pair<double, double> world_to_pixel(double x, double y) const {
        return {(x - origin_x) / resolution, (y - origin_y) / resolution};
    }

    std::pair<double, double> pixel_to_world(double px, double py) const {
        return {origin_x + px * resolution, origin_y + py * resolution};
    }

    bool in_bounds(int px, int py) const {
        return px >= 0 && px < width && py >= 0 && py < height;
    }
};

// --- exports -----------------------------------------------------------------

/// Min-max normalized single-channel PGM (P2). The header comment carries the
/// original value range so the scale is recoverable.
inline void write_pgm(const Tensor& plane_hw, const std::string& path) {
    const int h = plane_hw.dim(0), w = plane_hw.dim(1);
    double lo = plane_hw[0], hi = plane_hw[0];
    for (int64_t i = 0; i < plane_hw.size(); ++i) {
        lo = std::min(lo, plane_hw[i]);
        hi = std::max(hi, plane_hw[i]);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "P2\n# min=" << lo << " max=" << hi << "\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int v = static_cast<int>(std::lround((plane_hw[static_cast<int64_t>(y) * w + x] - lo) /
                                                 span * 255.0));
            f << v << (x + 1 < w ? ' ' : '\n');
        }
    }
}

inline void write_pgm_channel(const BEVGrid& grid, int channel, const std::string& path) {
    Tensor plane({grid.height, grid.width});
    std::copy(grid.data.plane(channel), grid.data.plane(channel) + plane.size(), plane.data());
    write_pgm(plane, path);
}

/// Raw little-endian f64 dump plus a JSON sidecar describing shape and geometry.
inline void write_bev_raw(const BEVGrid& grid, const std::string& path_base) {
    std::ofstream raw(path_base + ".f64", std::ios::binary);
    if (!raw) throw std::runtime_error("cannot open " + path_base + ".f64");
    raw.write(reinterpret_cast<const char*>(grid.data.data()),
              static_cast<std::streamsize>(grid.data.size() * sizeof(double)));
    nlohmann::json meta = {
        {"shape", {grid.channels(), grid.height, grid.width}},
        {"resolution", grid.resolution},
        {"origin", {grid.origin_x, grid.origin_y}},
        {"dtype", "f64-le"},
    };
    std::ofstream side(path_base + ".json");
    side << meta.dump(2) << "\n";
}

}  // namespace rcbev
