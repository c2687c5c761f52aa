#include "hvnet/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace hvnet {

void adam_step(std::map<std::string, Tensor>& params, AdamState& state, double lr) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (auto& [name, param] : params) {
        auto m_it = state.m.find(name);
        if (m_it == state.m.end()) {
            m_it = state.m.emplace(name, Tensor(param.shape())).first;
            state.v.emplace(name, Tensor(param.shape()));
        }
        Tensor& m = m_it->second;
        Tensor& v = state.v.at(name);
        if (m.shape() != param.shape()) {
            throw std::invalid_argument("adam_step: moment shape " + m.shape_string() +
                                        " does not match parameter \"" + name + "\" shape " +
                                        param.shape_string());
        }
        auto pv = param.data();
        auto gv = param.grad();
        auto mv = m.data();
        auto vv = v.data();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double g = gv[i];
            if (!std::isfinite(g)) {
                throw std::runtime_error("adam_step: non-finite gradient in parameter \"" + name +
                                         "\"");
            }
            mv[i] = state.beta1 * mv[i] + (1.0 - state.beta1) * g;
            vv[i] = state.beta2 * vv[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = mv[i] / bc1;
            const double v_hat = vv[i] / bc2;
            pv[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

bool plateau_update(PlateauSchedule& schedule, double val_loss) {
    if (!std::isfinite(val_loss)) {
        throw std::runtime_error("plateau_update: validation loss is not finite");
    }
    if (!schedule.has_best || val_loss < schedule.best) {
        schedule.best = val_loss;
        schedule.has_best = true;
        schedule.stall = 0;
        return false;
    }
    schedule.stall += 1;
    if (schedule.stall >= schedule.patience) {
        schedule.lr = std::max(schedule.lr * schedule.factor, schedule.min_lr);
        schedule.stall = 0;
        return true;
    }
    return false;
}

} // namespace hvnet
