#pragma once

#include <optional>

#include "qseg/tensor.hpp"

namespace qseg {

/// One 1-way 1-shot segmentation task: a labeled support image and a query
/// image, with the query ground truth attached when known.
struct Episode {
    Tensor support_image;  // H x W x 1
    Tensor support_mask;   // H x W binary
    Tensor query_image;    // H x W x 1
    std::optional<Tensor> query_mask;
    int class_id = -1;
    int support_volume = -1;
    int query_volume = -1;
    int support_slice = -1;
    int query_slice = -1;
};

}  // namespace qseg
