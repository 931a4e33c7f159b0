#pragma once

#include <string>
#include <vector>

#include "dscl/tensor.hpp"

namespace dscl {

/// A labeled image set: images [N,C,H,W] with task-local integer labels.
/// `class_names` (one per label value) and `provenance` travel with the data
/// for report plumbing; both may be empty for ad-hoc tensors.
template <typename T = float>
struct Dataset {
    Tensor<T> images;
    std::vector<int64_t> labels;
    std::vector<std::string> class_names;
    std::string provenance;

    int64_t size() const { return images.defined() ? images.dims[0] : 0; }

    void validate() const {
        if (!images.defined() || images.ndims() != 4)
            throw DataError("dataset images must be a 4-d tensor");
        if (static_cast<int64_t>(labels.size()) != images.dims[0])
            throw DataError("dataset has " + std::to_string(images.dims[0]) +
                            " images but " + std::to_string(labels.size()) + " labels");
    }

    /// Copy of the selected samples, in the given order.
    Dataset select(const std::vector<int64_t>& idx) const {
        const int64_t C = images.dims[1], H = images.dims[2], W = images.dims[3];
        const int64_t stride = C * H * W;
        Dataset out;
        out.class_names = class_names;
        out.provenance = provenance;
        out.images = Tensor<T>::zeros({static_cast<int64_t>(idx.size()), C, H, W});
        out.labels.reserve(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            const int64_t i = idx[k];
            if (i < 0 || i >= size()) throw DataError("sample index out of range");
            std::copy(images.ptr() + i * stride, images.ptr() + (i + 1) * stride,
                      out.images.ptr() + static_cast<int64_t>(k) * stride);
            out.labels.push_back(labels[static_cast<size_t>(i)]);
        }
        return out;
    }

    /// Copy of samples [first, first+count) as a batch tensor.
    Tensor<T> batch_images(int64_t first, int64_t count) const {
        const int64_t C = images.dims[1], H = images.dims[2], W = images.dims[3];
        const int64_t stride = C * H * W;
        if (first < 0 || count < 1 || first + count > size())
            throw DataError("batch range out of bounds");
        Tensor<T> out = Tensor<T>::zeros({count, C, H, W});
        std::copy(images.ptr() + first * stride, images.ptr() + (first + count) * stride,
                  out.ptr());
        return out;
    }

    std::vector<int64_t> batch_labels(int64_t first, int64_t count) const {
        return {labels.begin() + first, labels.begin() + first + count};
    }

    /// Single sample as a batch of one.
    Tensor<T> sample_image(int64_t i) const { return batch_images(i, 1); }
};

}  // namespace dscl
