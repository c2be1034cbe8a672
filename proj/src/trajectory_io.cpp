#include <charconv>
#include <ostream>

#include "json.hpp"
#include "tokenlabel/training.hpp"

namespace tokenlabel {

namespace {

std::string format_number(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::string trajectory_json_line(const TrajectoryRecord& record) {
  nlohmann::ordered_json doc;
  doc["step"] = record.step;
  doc["acc"] = record.loss.acc;
  doc["ent"] = record.loss.ent;
  doc["kl"] = record.loss.kl;
  doc["total"] = record.loss.total;
  auto top = nlohmann::ordered_json::array();
  for (const auto& t : record.top_tokens) top.push_back({t.token, t.prob});
  doc["top"] = std::move(top);
  return doc.dump();
}

void write_trajectory_jsonl(std::ostream& out, std::span<const TrajectoryRecord> records) {
  for (const auto& rec : records) out << trajectory_json_line(rec) << '\n';
}

void write_trajectory_csv(std::ostream& out, std::span<const TrajectoryRecord> records) {
  out << "step,total,acc,ent,kl,p_max,argmax\n";
  for (const auto& rec : records) {
    out << rec.step << ',' << format_number(rec.loss.total) << ',' << format_number(rec.loss.acc)
        << ',' << format_number(rec.loss.ent) << ',' << format_number(rec.loss.kl) << ','
        << format_number(rec.p_max) << ',' << csv_field(rec.argmax_token) << '\n';
  }
}

}  // namespace tokenlabel
