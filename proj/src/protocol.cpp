#include "tokenlabel/protocol.hpp"

#include <cmath>

#include "json.hpp"
#include "tokenlabel/error.hpp"

namespace tokenlabel::protocol {

using nlohmann::json;

namespace {

json sparse_to_json(const SparseVector& sparse) {
  json out = json::array();
  for (const auto& [id, value] : sparse) out.push_back(json::array({id, value}));
  return out;
}

std::string quote(std::string_view line) {
  constexpr std::size_t kMax = 200;
  std::string shown(line.substr(0, kMax));
  if (line.size() > kMax) shown += "...";
  return "'" + shown + "'";
}

json parse_reply(std::string_view line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error&) {
    throw TransportError("malformed evaluator reply " + quote(line));
  }
  if (!doc.is_object()) throw TransportError("evaluator reply is not an object: " + quote(line));
  if (!doc.contains("v") || !doc["v"].is_number_integer() || doc["v"].get<int>() != kVersion) {
    throw TransportError("evaluator reply has missing or unsupported version: " + quote(line));
  }
  if (auto it = doc.find("err"); it != doc.end() && !it->is_null()) {
    throw TransportError("evaluator reported an error: " +
                         (it->is_string() ? it->get<std::string>() : it->dump()));
  }
  return doc;
}

SparseVector sparse_from_json(const json& value, std::string_view line) {
  if (!value.is_array()) throw TransportError("expected an array of [id, value] pairs: " + quote(line));
  SparseVector out;
  out.reserve(value.size());
  for (const auto& pair : value) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_unsigned() ||
        !pair[1].is_number()) {
      throw TransportError("bad [id, value] pair in " + quote(line));
    }
    const double v = pair[1].get<double>();
    if (!std::isfinite(v)) throw TransportError("non-finite value in " + quote(line));
    out.emplace_back(pair[0].get<std::size_t>(), v);
  }
  return out;
}

std::string finish(const json& doc) { return doc.dump(); }

}  // namespace

SparseVector sparsify(const ProbDist& p, std::size_t top_n) {
  const auto top = top_k(p, std::min(top_n, p.size()));
  double mass = 0.0;
  for (const auto& [id, prob] : top) mass += prob;
  SparseVector out;
  out.reserve(top.size());
  for (const auto& [id, prob] : top) out.emplace_back(id.index, prob / mass);
  return out;
}

double two_way_softmax(double z0, double z1) {
  // sigmoid(z1 - z0), evaluated without overflow.
  const double d = z1 - z0;
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

std::vector<double> densify(const SparseVector& sparse, std::size_t size) {
  std::vector<double> dense(size, 0.0);
  for (const auto& [id, value] : sparse) {
    if (id >= size) throw TransportError("token id " + std::to_string(id) + " out of range");
    dense[id] = value;
  }
  return dense;
}

std::vector<double> densify_prior(const SparseVector& sparse, std::size_t size) {
  std::vector<double> dense(size, 0.0);
  std::vector<bool> named(size, false);
  double mass = 0.0;
  for (const auto& [id, value] : sparse) {
    if (id >= size) throw TransportError("prior token id " + std::to_string(id) + " out of range");
    if (named[id]) throw TransportError("prior names token id " + std::to_string(id) + " twice");
    if (value < 0.0) throw TransportError("negative prior entry");
    named[id] = true;
    dense[id] = value;
    mass += value;
  }
  const std::size_t unnamed = size - sparse.size();
  if (unnamed > 0 && mass < 1.0) {
    const double share = (1.0 - mass) / static_cast<double>(unnamed);
    for (std::size_t i = 0; i < size; ++i) {
      if (!named[i]) dense[i] = share;
    }
  }
  return dense;
}

std::string encode_vocab(std::span<const std::string> tokens) {
  return finish({{"v", kVersion}, {"op", "vocab"}, {"tokens", tokens}});
}

std::string encode_predict(std::string_view sentence, std::size_t target,
                           const SparseVector& label, bool want_grad) {
  return finish({{"v", kVersion},
                 {"op", "predict"},
                 {"sentence", sentence},
                 {"target", target},
                 {"label", sparse_to_json(label)},
                 {"want_grad", want_grad}});
}

std::string encode_prior(std::string_view sentence) {
  return finish({{"v", kVersion}, {"op", "prior"}, {"sentence", sentence}});
}

PredictReply decode_predict(std::string_view line) {
  const json doc = parse_reply(line);
  PredictReply reply;
  if (auto it = doc.find("logits"); it != doc.end()) {
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
      throw TransportError("\"logits\" must be [z0, z1]: " + quote(line));
    }
    reply.m = two_way_softmax((*it)[0].get<double>(), (*it)[1].get<double>());
  } else if (auto m = doc.find("m"); m != doc.end() && m->is_number()) {
    reply.m = m->get<double>();
  } else {
    throw TransportError("predict reply has neither \"m\" nor \"logits\": " + quote(line));
  }
  if (!std::isfinite(reply.m) || reply.m < 0.0 || reply.m > 1.0) {
    throw TransportError("prediction outside [0, 1]: " + quote(line));
  }
  if (auto it = doc.find("grad"); it != doc.end() && !it->is_null()) {
    reply.grad = sparse_from_json(*it, line);
  }
  return reply;
}

SparseVector decode_prior(std::string_view line) {
  const json doc = parse_reply(line);
  auto it = doc.find("q");
  if (it == doc.end()) throw TransportError("prior reply lacks \"q\": " + quote(line));
  return sparse_from_json(*it, line);
}

void decode_ack(std::string_view line) { parse_reply(line); }

Request decode_request(std::string_view line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error&) {
    throw TransportError("malformed request " + quote(line));
  }
  if (!doc.is_object() || doc.value("v", 0) != kVersion || !doc.contains("op") ||
      !doc["op"].is_string()) {
    throw TransportError("invalid request " + quote(line));
  }
  Request req;
  try {
    req.op = doc["op"].get<std::string>();
    req.sentence = doc.value("sentence", std::string{});
    req.target = doc.value("target", std::size_t{0});
    req.want_grad = doc.value("want_grad", false);
    if (doc.contains("label")) req.label = sparse_from_json(doc["label"], line);
    if (doc.contains("tokens")) req.tokens = doc["tokens"].get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw TransportError("invalid request " + quote(line));
  }
  return req;
}

std::string encode_ack() { return finish({{"v", kVersion}, {"err", nullptr}}); }

std::string encode_predict_reply(double m, const std::optional<SparseVector>& grad) {
  json doc = {{"v", kVersion}, {"m", m}, {"err", nullptr}};
  if (grad) doc["grad"] = sparse_to_json(*grad);
  return finish(doc);
}

std::string encode_logits_reply(double z0, double z1, const std::optional<SparseVector>& grad) {
  json doc = {{"v", kVersion}, {"logits", {z0, z1}}, {"err", nullptr}};
  if (grad) doc["grad"] = sparse_to_json(*grad);
  return finish(doc);
}

std::string encode_prior_reply(const SparseVector& q) {
  return finish({{"v", kVersion}, {"q", sparse_to_json(q)}, {"err", nullptr}});
}

std::string encode_error_reply(std::string_view message) {
  return finish({{"v", kVersion}, {"err", message}});
}

}  // namespace tokenlabel::protocol
