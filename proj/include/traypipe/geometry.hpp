#pragma once

namespace traypipe {

/// Axis-aligned rectangle in pixel coordinates. Origin is the top-left
/// corner of the image, y grows downward. Detectors emit fractional
/// coordinates, so the fields are real-valued; cropping rounds outward.
struct BBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
};

/// Strictly positive area and non-negative coordinates.
bool box_valid(const BBox& b);

/// Throws InputError when the box is not valid.
void require_valid(const BBox& b);

/// Valid and contained in a width x height image.
bool box_within(const BBox& b, int image_width, int image_height);

double box_area(const BBox& b);

/// Intersection over union; 0 for disjoint boxes. Both boxes must be valid.
double box_iou(const BBox& a, const BBox& b);

/// Integer pixel rectangle, half-open: [x, x2) x [y, y2).
struct PixelRect {
    int x = 0;
    int y = 0;
    int x2 = 0;
    int y2 = 0;

    int width() const { return x2 - x; }
    int height() const { return y2 - y; }
};

/// Floor the mins, ceil the maxes, so no covered pixel is lost.
PixelRect round_outward(const BBox& b);

/// Grow by pad on every side, then clamp to the image.
PixelRect expand_and_clamp(PixelRect r, int pad, int image_width, int image_height);

} // namespace traypipe
