#include "hvnet/tape.hpp"

#include <stdexcept>

namespace hvnet {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() {
    return g_active_tape;
}

void Tape::record(const char* op, Tensor output, std::function<void()> backprop) {
    if (consumed_) {
        throw std::runtime_error("tape already consumed by backward; reset() before recording");
    }
    records_.push_back(Record{op, std::move(output), std::move(backprop)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                    loss.shape_string());
    }
    backward_seeded(loss, Tensor(loss.shape(), 1.0));
}

void Tape::backward_seeded(const Tensor& output, const Tensor& seed) {
    if (consumed_) {
        throw std::runtime_error("tape already consumed by backward; reset() first");
    }
    if (output.shape() != seed.shape()) {
        throw std::invalid_argument("backward seed shape " + seed.shape_string() +
                                    " does not match output shape " + output.shape_string());
    }
    consumed_ = true;
    Tensor out = output;
    auto g = out.grad();
    auto s = seed.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += s[i];
    }
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (!it->output.has_grad()) {
            continue; // not on a path to the seeded output
        }
        it->backprop();
    }
}

void Tape::reset() {
    records_.clear();
    consumed_ = false;
}

TapeScope::TapeScope() : previous_(g_active_tape) {
    g_active_tape = &tape_;
}

TapeScope::~TapeScope() {
    g_active_tape = previous_;
}

NoGradGuard::NoGradGuard() : previous_(g_active_tape) {
    g_active_tape = nullptr;
}

NoGradGuard::~NoGradGuard() {
    g_active_tape = previous_;
}

} // namespace hvnet
