#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace flowconvert {

struct TrainLog {
    std::vector<std::pair<int, double>> curve;  // (step, minibatch loss)
    int steps = 0;
    double initial_heldout = 0.0;
    double final_heldout = 0.0;

    std::string to_csv(const std::string& loss_name) const
    {
        std::ostringstream os;
        os.precision(10);
        os << "step," << loss_name << "\n";
        for (const auto& [s, l] : curve) os << s << "," << l << "\n";
        return os.str();
    }
};

/// Shuffled epochs over a fixed index set; order is a function of the seed only.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed)
    {
        FLOWCONVERT_EXPECT(n > 0, ContractError, "BatchSampler: empty dataset");
        FLOWCONVERT_EXPECT(batch > 0, ConfigError, "batch size must be positive");
        reshuffle();
    }

    std::vector<std::size_t> next()
    {
        std::vector<std::size_t> out;
        while (out.size() < std::min(batch_, n_)) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle()
    {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        for (std::size_t i = n_ - 1; i > 0; --i)
            std::swap(order_[i], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i)))]);
        pos_ = 0;
    }

    std::size_t n_, batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

inline void check_finite_loss(double loss, int step, double grad_norm, const char* what)
{
    if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
        std::ostringstream os;
        os << what << " diverged at step " << step << ": loss=" << loss << " grad_norm=" << grad_norm;
        throw TrainingError(os.str());
    }
}

} // namespace flowconvert
