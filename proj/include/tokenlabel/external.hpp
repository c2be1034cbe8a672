#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "tokenlabel/evaluator.hpp"
#include "tokenlabel/protocol.hpp"

namespace tokenlabel {

/// One request line out, one reply line back. Not thread-safe on its own.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string exchange(std::string_view line) = 0;
};

/// Newline-delimited messages over a TCP connection.
class TcpTransport final : public Transport {
 public:
  TcpTransport(const std::string& host, unsigned short port);
  ~TcpTransport() override;
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  std::string exchange(std::string_view line) override;

 private:
  int fd_ = -1;
  std::string buffer_;
};

/// Talks to a child process over its stdin/stdout.
class ProcessTransport final : public Transport {
 public:
  /// `command` runs under /bin/sh -c.
  explicit ProcessTransport(const std::string& command);
  ~ProcessTransport() override;
  ProcessTransport(const ProcessTransport&) = delete;
  ProcessTransport& operator=(const ProcessTransport&) = delete;

  std::string exchange(std::string_view line) override;

 private:
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string buffer_;
};

/// In-process transport; the handler plays the server.
class FunctionTransport final : public Transport {
 public:
  using Handler = std::function<std::string(std::string_view)>;
  explicit FunctionTransport(Handler handler) : handler_(std::move(handler)) {}
  std::string exchange(std::string_view line) override { return handler_(line); }

 private:
  Handler handler_;
};

/// "tcp://host:port", "host:port", or "stdio:<command>".
std::unique_ptr<Transport> connect_transport(const std::string& address);

struct ExternalOptions {
  /// Label support sent per request (top entries, renormalized).
  std::size_t label_top_n = 64;
  /// Send the vocabulary once before the first request.
  bool send_vocab = true;
  /// Whether the server is expected to return dm/dp; without it the
  /// evaluator is usable for scoring only.
  bool gradients = true;
};

/// Client for the wire protocol. Requests are serialized per connection.
class ExternalEvaluator final : public Evaluator {
 public:
  ExternalEvaluator(std::unique_ptr<Transport> transport, const Corpus& corpus,
                    ExternalOptions options = {});

  EvalResult predict(const EvalQuery& query, bool want_grad) const override;
  bool supports_gradient() const override { return options_.gradients; }
  bool supports_prior() const override { return true; }
  std::vector<double> raw_prior(const Sentence& sentence) const override;
  std::size_t vocab_size() const override { return vocab_.size(); }

 private:
  std::string exchange(const std::string& line) const;

  mutable std::mutex mutex_;
  std::unique_ptr<Transport> transport_;
  mutable bool vocab_sent_ = false;
  std::vector<std::string> vocab_;
  ExternalOptions options_;
};

}  // namespace tokenlabel
