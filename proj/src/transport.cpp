#include <netdb.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "tokenlabel/error.hpp"
#include "tokenlabel/external.hpp"

namespace tokenlabel {

namespace {

std::string errno_message(const std::string& what) {
  return what + ": " + std::strerror(errno);
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_message("write to evaluator failed"));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string read_line(int fd, std::string& buffer) {
  for (;;) {
    if (auto nl = buffer.find('\n'); nl != std::string::npos) {
      std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    char chunk[4096];
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_message("read from evaluator failed"));
    }
    if (n == 0) throw TransportError("evaluator closed the connection");
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

std::string with_newline(std::string_view line) {
  std::string out(line);
  out += '\n';
  return out;
}

}  // namespace

TcpTransport::TcpTransport(const std::string& host, unsigned short port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string service = std::to_string(port);
  if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &found); rc != 0) {
    throw TransportError("cannot resolve " + host + ": " + ::gai_strerror(rc));
  }
  for (addrinfo* ai = found; ai; ai = ai->ai_next) {
    fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd_ < 0) continue;
    if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd_);
    fd_ = -1;
  }
  ::freeaddrinfo(found);
  if (fd_ < 0) throw TransportError("cannot connect to " + host + ":" + service);
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

std::string TcpTransport::exchange(std::string_view line) {
  write_all(fd_, with_newline(line));
  return read_line(fd_, buffer_);
}

ProcessTransport::ProcessTransport(const std::string& command) {
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe(in_pipe) != 0) throw TransportError(errno_message("pipe"));
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw TransportError(errno_message("pipe"));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw TransportError(errno_message("fork"));
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pid_ = pid;
  // A dead child must surface as a TransportError, not SIGPIPE.
  ::signal(SIGPIPE, SIG_IGN);
}

ProcessTransport::~ProcessTransport() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

std::string ProcessTransport::exchange(std::string_view line) {
  write_all(to_child_, with_newline(line));
  return read_line(from_child_, buffer_);
}

std::unique_ptr<Transport> connect_transport(const std::string& address) {
  if (address.starts_with("stdio:")) {
    const std::string command = address.substr(6);
    if (command.empty()) throw TransportError("stdio address needs a command");
    return std::make_unique<ProcessTransport>(command);
  }
  std::string rest = address;
  if (rest.starts_with("tcp://")) rest = rest.substr(6);
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw TransportError("evaluator address must be tcp://host:port or stdio:<command>, got '" +
                         address + "'");
  }
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(rest.substr(colon + 1), &used);
    if (used != rest.size() - colon - 1 || port == 0 || port > 65535) throw std::out_of_range("");
  } catch (const std::exception&) {
    throw TransportError("bad port in evaluator address '" + address + "'");
  }
  return std::make_unique<TcpTransport>(rest.substr(0, colon), static_cast<unsigned short>(port));
}

ExternalEvaluator::ExternalEvaluator(std::unique_ptr<Transport> transport, const Corpus& corpus,
                                     ExternalOptions options)
    : transport_(std::move(transport)), vocab_(corpus.vocab().tokens()), options_(options) {
  if (!transport_) throw TransportError("no transport");
  if (options_.label_top_n == 0) throw Error("label_top_n must be positive");
}

std::string ExternalEvaluator::exchange(const std::string& line) const {
  std::lock_guard lock(mutex_);
  if (options_.send_vocab && !vocab_sent_) {
    protocol::decode_ack(transport_->exchange(protocol::encode_vocab(vocab_)));
    vocab_sent_ = true;
  }
  return transport_->exchange(line);
}

EvalResult ExternalEvaluator::predict(const EvalQuery& query, bool want_grad) const {
  if (query.label.size() != vocab_.size()) throw Error("external predict: dimension mismatch");
  if (query.target_position >= query.sentence.token_ids.size()) {
    throw Error("external predict: target position out of range");
  }
  const auto label = protocol::sparsify(query.label, options_.label_top_n);
  const auto reply = protocol::decode_predict(
      exchange(protocol::encode_predict(query.sentence.text, query.target_position, label,
                                        want_grad)));
  EvalResult result;
  result.m = clamp_prediction(reply.m);
  if (want_grad && reply.grad) result.grad_m = protocol::densify(*reply.grad, vocab_.size());
  return result;
}

std::vector<double> ExternalEvaluator::raw_prior(const Sentence& sentence) const {
  const auto q = protocol::decode_prior(exchange(protocol::encode_prior(sentence.text)));
  return protocol::densify_prior(q, vocab_.size());
}

}  // namespace tokenlabel
