#include "sdcs/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <tuple>

#include "sdcs/error.hpp"

namespace sdcs::eval {
namespace {

double ratio(long num, long den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::ordered_json rates_json(const RateSet& r) {
  return {{"accuracy", r.accuracy},       {"precision", r.precision},
          {"recall", r.recall},           {"f1", r.f1},
          {"specificity", r.specificity}, {"sensitivity", r.sensitivity}};
}

}  // namespace

MatchResult match_detections(std::span<const Detection> detections,
                             std::span<const Annotation> truths, double radius) {
  if (!(radius > 0.0)) throw ConfigError("match radius must be positive");
  struct Candidate {
    double d2;
    int truth;
    int detection;
  };
  std::vector<Candidate> candidates;
  const double r2 = radius * radius;
  for (int t = 0; t < static_cast<int>(truths.size()); ++t) {
    for (int d = 0; d < static_cast<int>(detections.size()); ++d) {
      const double dx = detections[d].x - truths[t].x;
      const double dy = detections[d].y - truths[t].y;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= r2) candidates.push_back({d2, t, d});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.d2, a.truth, a.detection) < std::tie(b.d2, b.truth, b.detection);
  });
  std::vector<char> det_used(detections.size(), 0);
  std::vector<char> truth_used(truths.size(), 0);
  MatchResult result;
  for (const Candidate& c : candidates) {
    if (det_used[c.detection] || truth_used[c.truth]) continue;
    det_used[c.detection] = 1;
    truth_used[c.truth] = 1;
    result.pairs.push_back({c.detection, c.truth, std::sqrt(c.d2)});
  }
  for (int d = 0; d < static_cast<int>(detections.size()); ++d) {
    if (!det_used[d]) result.false_positives.push_back(d);
  }
  for (int t = 0; t < static_cast<int>(truths.size()); ++t) {
    if (!truth_used[t]) result.false_negatives.push_back(t);
  }
  return result;
}

RateSet rates_from_counts(const BinaryCounts& c) {
  RateSet r;
  const long total = c.tp + c.fp + c.tn + c.fn;
  r.accuracy = ratio(c.tp + c.tn, total);
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.sensitivity = r.recall;
  r.specificity = ratio(c.tn, c.tn + c.fp);
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

RateSet detection_rates(const MatchResult& match, std::size_t detections, std::size_t truths) {
  RateSet r;
  const long tp = static_cast<long>(match.pairs.size());
  r.precision = ratio(tp, static_cast<long>(detections));
  r.recall = ratio(tp, static_cast<long>(truths));
  r.sensitivity = r.recall;
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  r.accuracy = ratio(tp, static_cast<long>(detections + truths) - tp);
  r.specificity = 1.0;
  return r;
}

MetricsReport compute_metrics(const MatchResult& match, std::span<const Detection> detections,
                              std::span<const Annotation> truths) {
  if (truths.empty()) throw DataError("compute_metrics: empty truth set");
  auto predicted = [&](int d) {
    const auto& cls = detections[d].cell_class;
    if (!cls) {
      throw DataError("compute_metrics: detection " + std::to_string(d) + " has no class label");
    }
    return class_index(*cls);
  };
  MetricsReport r;
  r.total_truths = static_cast<long>(truths.size());
  r.total_detections = static_cast<long>(detections.size());
  r.matched = static_cast<long>(match.pairs.size());
  for (const Annotation& t : truths) ++r.truth_counts[class_index(t.cell_class)];
  for (const MatchPair& p : match.pairs) {
    ++r.confusion[class_index(truths[p.truth].cell_class)][predicted(p.detection)];
  }
  for (int t : match.false_negatives) ++r.missed[class_index(truths[t].cell_class)];
  for (int d : match.false_positives) ++r.spurious[predicted(d)];

  const long universe = r.matched + static_cast<long>(match.false_negatives.size()) +
                        static_cast<long>(match.false_positives.size());
  long correct = 0;
  BinaryCounts pooled;
  for (int c = 0; c < kNumCellClasses; ++c) {
    long row = 0;
    long col = 0;
    for (int k = 0; k < kNumCellClasses; ++k) {
      row += r.confusion[c][k];
      col += r.confusion[k][c];
    }
    BinaryCounts& bc = r.class_counts[c];
    bc.tp = r.confusion[c][c];
    bc.fn = row - bc.tp + r.missed[c];
    bc.fp = col - bc.tp + r.spurious[c];
    bc.tn = universe - bc.tp - bc.fn - bc.fp;
    r.per_class[c] = rates_from_counts(bc);
    correct += bc.tp;
    pooled.tp += bc.tp;
    pooled.fp += bc.fp;
    pooled.tn += bc.tn;
    pooled.fn += bc.fn;
  }
  auto mean_of = [&](double RateSet::*field) {
    double sum = 0.0;
    for (const RateSet& rs : r.per_class) sum += rs.*field;
    return sum / kNumCellClasses;
  };
  for (double RateSet::*field : {&RateSet::accuracy, &RateSet::precision, &RateSet::recall,
                                 &RateSet::f1, &RateSet::specificity, &RateSet::sensitivity}) {
    r.macro.*field = mean_of(field);
  }
  r.micro = rates_from_counts(pooled);
  r.overall_accuracy = ratio(correct, universe);
  r.matched_accuracy = r.matched ? static_cast<double>(correct) / r.matched : 0.0;
  const RateSet det = detection_rates(match, detections.size(), truths.size());
  r.detection_precision = det.precision;
  r.detection_recall = det.recall;
  r.detection_f1 = det.f1;

  long pos = 0;
  long neg = 0;
  for (const Detection& d : detections) {
    if (!d.cell_class) continue;
    pos += *d.cell_class == CellClass::kKi67Positive;
    neg += *d.cell_class == CellClass::kKi67Negative;
  }
  if (pos + neg > 0) r.ki67_predicted = ki67_index(pos, neg);
  long tpos = r.truth_counts[class_index(CellClass::kKi67Positive)];
  long tneg = r.truth_counts[class_index(CellClass::kKi67Negative)];
  if (tpos + tneg > 0) r.ki67_truth = ki67_index(tpos, tneg);
  return r;
}

double ki67_index(long positives, long negatives) {
  if (positives < 0 || negatives < 0) throw DataError("negative cell counts");
  if (positives + negatives == 0) throw DataError("Ki67 index undefined: no cancer cells");
  return 100.0 * static_cast<double>(positives) / static_cast<double>(positives + negatives);
}

double ki67_index(std::span<const Detection> classified) {
  long pos = 0;
  long neg = 0;
  for (const Detection& d : classified) {
    if (!d.cell_class) continue;
    pos += *d.cell_class == CellClass::kKi67Positive;
    neg += *d.cell_class == CellClass::kKi67Negative;
  }
  return ki67_index(pos, neg);
}

double ki67_index(std::span<const Annotation> truths) {
  long pos = 0;
  long neg = 0;
  for (const Annotation& a : truths) {
    pos += a.cell_class == CellClass::kKi67Positive;
    neg += a.cell_class == CellClass::kKi67Negative;
  }
  return ki67_index(pos, neg);
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "sdcs.metrics";
  j["schema_version"] = kMetricsSchemaVersion;
  j["classes"] = nlohmann::ordered_json::array();
  for (CellClass c : kAllCellClasses) j["classes"].push_back(std::string(cell_class_label(c)));
  j["counts"] = {{"truths", r.total_truths},
                 {"detections", r.total_detections},
                 {"matched", r.matched}};
  j["confusion"] = r.confusion;
  j["missed"] = r.missed;
  j["spurious"] = r.spurious;
  j["truth_counts"] = r.truth_counts;
  auto& per_class = j["per_class"] = nlohmann::ordered_json::object();
  for (CellClass c : kAllCellClasses) {
    const int i = class_index(c);
    auto entry = rates_json(r.per_class[i]);
    entry["tp"] = r.class_counts[i].tp;
    entry["fp"] = r.class_counts[i].fp;
    entry["tn"] = r.class_counts[i].tn;
    entry["fn"] = r.class_counts[i].fn;
    per_class[std::string(cell_class_label(c))] = entry;
  }
  j["macro"] = rates_json(r.macro);
  j["micro"] = rates_json(r.micro);
  j["overall_accuracy"] = r.overall_accuracy;
  j["matched_accuracy"] = r.matched_accuracy;
  j["detection"] = {{"precision", r.detection_precision},
                    {"recall", r.detection_recall},
                    {"f1", r.detection_f1}};
  j["ki67_index_predicted"] = r.ki67_predicted ? nlohmann::ordered_json(*r.ki67_predicted)
                                               : nlohmann::ordered_json(nullptr);
  j["ki67_index_truth"] = r.ki67_truth ? nlohmann::ordered_json(*r.ki67_truth)
                                       : nlohmann::ordered_json(nullptr);
  return j.dump(2) + "\n";
}

std::string metrics_to_text(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "truths " << r.total_truths << "  detections " << r.total_detections << "  matched "
     << r.matched << "\n";
  os << "detection  precision " << r.detection_precision << "  recall " << r.detection_recall
     << "  f1 " << r.detection_f1 << "\n";
  os << "accuracy   overall " << r.overall_accuracy << "  on matched " << r.matched_accuracy
     << "\n\n";
  os << std::left << std::setw(12) << "class" << std::right;
  for (const char* h : {"acc", "prec", "recall", "f1", "spec", "sens"}) os << std::setw(9) << h;
  os << "\n";
  auto row = [&](const std::string& name, const RateSet& rs) {
    os << std::left << std::setw(12) << name << std::right << std::setw(9) << rs.accuracy
       << std::setw(9) << rs.precision << std::setw(9) << rs.recall << std::setw(9) << rs.f1
       << std::setw(9) << rs.specificity << std::setw(9) << rs.sensitivity << "\n";
  };
  for (CellClass c : kAllCellClasses) {
    row(std::string(cell_class_label(c)), r.per_class[class_index(c)]);
  }
  row("macro", r.macro);
  row("micro", r.micro);
  os << "\nconfusion (rows = truth, cols = predicted, last col = missed)\n";
  for (CellClass c : kAllCellClasses) {
    const int i = class_index(c);
    os << std::left << std::setw(12) << cell_class_label(c) << std::right;
    for (int k = 0; k < kNumCellClasses; ++k) os << std::setw(7) << r.confusion[i][k];
    os << std::setw(7) << r.missed[i] << "\n";
  }
  os << std::setprecision(2);
  if (r.ki67_predicted) os << "\nKi67 index predicted " << *r.ki67_predicted << "%";
  if (r.ki67_truth) os << "  truth " << *r.ki67_truth << "%";
  os << "\n";
  return os.str();
}

}  // namespace sdcs::eval
