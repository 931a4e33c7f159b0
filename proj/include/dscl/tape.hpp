#pragma once

#include <functional>

#include "dscl/tensor.hpp"

namespace dscl {

/// Reverse-mode autodiff tape. Ops push one backward closure per recorded
/// node; backward() seeds the loss gradient with 1 and replays the closures
/// in reverse order. Node serial numbers let backward() verify the loss it
/// is asked to differentiate was actually produced on this tape.
class Tape {
   public:
    int64_t record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
        return static_cast<int64_t>(nodes_.size()) - 1;
    }

    size_t size() const { return nodes_.size(); }

    template <typename T>
    void backward(Tensor<T>& loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw TapeError("backward: loss must be a defined scalar tensor");
        if (loss.tape_serial < 0 || loss.tape_serial >= static_cast<int64_t>(nodes_.size()))
            throw TapeError("backward: loss was not produced on this tape");
        if (consumed_) throw TapeError("backward: tape already replayed");
        consumed_ = true;
        loss.ensure_grad()[0] = T(1);
        for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
    }

    void clear() {
        nodes_.clear();
        consumed_ = false;
    }

   private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

}  // namespace dscl
