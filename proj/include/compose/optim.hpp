#pragma once

#include <cmath>
#include <vector>

#include "compose/common.hpp"

namespace compose {

struct Adam {
    std::vector<Mat> m, v;
    long step = 0;
    Scalar beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void update(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, Scalar lr) {
        ++step;
        Scalar bc1 = 1 - std::pow(beta1, Scalar(step));
        Scalar bc2 = 1 - std::pow(beta2, Scalar(step));
        if (m.empty()) {
            for (Mat* w : params) {
                m.push_back(Mat::Zero(w->rows(), w->cols()));
                v.push_back(Mat::Zero(w->rows(), w->cols()));
            }
        }
        for (size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1 - beta1) * (*grads[i]);
            v[i] = beta2 * v[i] + (1 - beta2) * grads[i]->array().square().matrix();
            params[i]->array() -= lr * (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + eps);
        }
    }
};

}  // namespace compose
