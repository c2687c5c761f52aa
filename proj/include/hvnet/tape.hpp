#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hvnet/tensor.hpp"

namespace hvnet {

// Reverse-mode tape. Ops append one record per executed primitive, in
// execution order, so inputs always precede their consumers. backward() walks
// the records in reverse and lets each one accumulate into its inputs' grad
// buffers; a tensor feeding several consumers therefore receives the sum of
// all branch gradients. A tape that has run backward must be reset() before
// it records again.
class Tape {
public:
    struct Record {
        const char* op;
        Tensor output;
        std::function<void()> backprop;
    };

    static Tape* active();

    void record(const char* op, Tensor output, std::function<void()> backprop);

    // loss must be scalar and reachable from tracked tensors; seeds d(loss)=1.
    void backward(const Tensor& loss);

    // Seeds d(output) with an arbitrary cotangent. Used by the gradient
    // checker to scalarize non-scalar ops.
    void backward_seeded(const Tensor& output, const Tensor& seed);

    void reset();
    bool consumed() const { return consumed_; }
    std::size_t size() const { return records_.size(); }

private:
    friend class TapeScope;

    std::vector<Record> records_;
    bool consumed_ = false;
};

// Installs a tape as the active recording target for its scope.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* previous_;
};

// Suspends recording (forward evaluation only) for its scope.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* previous_;
};

} // namespace hvnet
