#include "traypipe/geometry.hpp"

#include "traypipe/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace traypipe {

bool box_valid(const BBox& b) {
    return b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_min < b.x_max && b.y_min < b.y_max;
}

void require_valid(const BBox& b) {
    if (!box_valid(b)) {
        throw InputError("invalid box (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) +
                         "," + std::to_string(b.x_max) + "," + std::to_string(b.y_max) + ")");
    }
}

bool box_within(const BBox& b, int image_width, int image_height) {
    return box_valid(b) && b.x_max <= static_cast<double>(image_width) &&
           b.y_max <= static_cast<double>(image_height);
}

double box_area(const BBox& b) {
    require_valid(b);
    return (b.x_max - b.x_min) * (b.y_max - b.y_min);
}

double box_iou(const BBox& a, const BBox& b) {
    require_valid(a);
    require_valid(b);
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
    const double uni = box_area(a) + box_area(b) - inter;
    return inter / uni;
}

PixelRect round_outward(const BBox& b) {
    require_valid(b);
    PixelRect r;
    r.x = static_cast<int>(std::floor(b.x_min));
    r.y = static_cast<int>(std::floor(b.y_min));
    r.x2 = static_cast<int>(std::ceil(b.x_max));
    r.y2 = static_cast<int>(std::ceil(b.y_max));
    return r;
}

PixelRect expand_and_clamp(PixelRect r, int pad, int image_width, int image_height) {
    if (pad < 0) {
        throw InputError("negative padding");
    }
    r.x = std::clamp(r.x - pad, 0, image_width);
    r.y = std::clamp(r.y - pad, 0, image_height);
    r.x2 = std::clamp(r.x2 + pad, 0, image_width);
    r.y2 = std::clamp(r.y2 + pad, 0, image_height);
    return r;
}

} // namespace traypipe
