// SPDX-License-Identifier: Apache-2.0
// Reference values computed outside this codebase (mpmath at 50 digits,
// scipy.stats, sklearn.metrics) and frozen here.
#pragma once

namespace oracle {

// exp(-(0 - 0.7)^2 / (2 * 0.2^2))
inline constexpr double kWeightAtZero = 0.002187491118182885;
// sqrt(0.8) / (sqrt(0.8) + sqrt(0.2)) and its complement
inline constexpr double kTemper08T2[2] = {0.6666666666666666, 0.3333333333333333};
// 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)
inline constexpr double kKlHalfVsThreeQuarter = 0.14384103622589046;
// temper((0.6, 0.4), 2)
inline constexpr double kTemper06T2[2] = {0.5505102572168219, 0.4494897427831781};
// 0.7 * 4 * KL(temper((0.8,0.2),2) || temper((0.6,0.4),2)) + 0.3 * -ln 0.6
inline constexpr double kMixedLossExample = 0.23157219960509322;
// centered (ln 0.86, ln 0.14)
inline constexpr double kSoftLogitExample = 0.9076449833191246;
// In-context entropy of knn k=1, C=5: uniform mixture s=1e-3 and additive s=1e-3.
inline constexpr double kKnnMixtureEntropy = 0.0076134344677655069;
inline constexpr double kKnnLaplaceEntropy = 0.031485572637916617;

// scipy.stats.wilcoxon(d, zero_method="wilcox", correction=True, method="approx")
// for d_i = ((37 i) mod 23 - 9) / 100, i = 0..29.
inline constexpr double kWilcoxonApproxStatistic = 161.5;
inline constexpr double kWilcoxonApproxP = 0.2297237289085876;
// scipy.stats.wilcoxon([0.3,-0.1,0.2,0.5,-0.4,0.6], method="exact")
inline constexpr double kWilcoxonExactStatistic = 5.0;
inline constexpr double kWilcoxonExactP = 0.3125;

// scipy.stats.friedmanchisquare on the tie-free 5x4 table in test_eval.
inline constexpr double kFriedmanStatistic = 9.239999999999995;
inline constexpr double kFriedmanP = 0.02626441798709072;

// sklearn roc_auc_score(multi_class="ovr", average="macro") on the 10x3 example.
inline constexpr double kOvrAuc = 0.8938492063492064;

}  // namespace oracle
