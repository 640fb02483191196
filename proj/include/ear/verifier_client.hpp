#pragma once

// Bridge to external verifier processes. Two transports speak the same
// JSON message pair:
//   request : {"prompt": str, "render_pgm_b64": str,
//              "entities": [{"surface": str, "attributes": [str],
//                            "relations": [[str, str, str]]}]}
//   response: {"scores": {surface: {"missing": f, "attribute": f,
//                                   "spatial": f}}}
// Scores are mistake severities in [0,1].
//
// The exec transport runs a child process and exchanges one
// newline-delimited JSON message per direction over its standard streams;
// the http transport POSTs to a configured URL.

#include "ear/constraints.hpp"
#include "ear/verifier_report.hpp"

#include <json.hpp>

#include <cstdio>
#include <stdexcept>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace ear {

struct verifier_transport_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct verifier_protocol_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct verifier_validation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string base64_encode(const std::string& in) {
  static const char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (size_t i = 0; i < in.size(); i += 3) {
    unsigned val = static_cast<unsigned char>(in[i]) << 16;
    if (i + 1 < in.size()) val |= static_cast<unsigned char>(in[i + 1]) << 8;
    if (i + 2 < in.size()) val |= static_cast<unsigned char>(in[i + 2]);
    out.push_back(tbl[(val >> 18) & 63]);
    out.push_back(tbl[(val >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? tbl[(val >> 6) & 63] : '=');
    out.push_back(i + 2 < in.size() ? tbl[val & 63] : '=');
  }
  return out;
}

}  // namespace detail

inline nlohmann::json make_verifier_request(const ConstraintSet& cs,
                                            const std::string& render_pgm) {
  nlohmann::json entities = nlohmann::json::array();
  for (int e = 0; e < cs.entity_count(); ++e) {
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& ab : cs.attributes)
      if (ab.entity == e) attrs.push_back(ab.surface);
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& rel : cs.relations)
      if (rel.e1 == e || rel.e2 == e)
        rels.push_back(nlohmann::json::array({cs.entities[rel.e1].surface,
                                              rel.kind.name(),
                                              cs.entities[rel.e2].surface}));
    entities.push_back({{"surface", cs.entities[e].surface},
                        {"attributes", attrs},
                        {"relations", rels}});
  }
  return nlohmann::json{{"prompt", cs.prompt},
                        {"render_pgm_b64", detail::base64_encode(render_pgm)},
                        {"entities", entities}};
}

// Validates a response body against the constraint set: every entity must
// be scored, every score in [0,1].
inline VerifierReport parse_verifier_response(const std::string& body,
                                              const ConstraintSet& cs) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw verifier_protocol_error(std::string("malformed response: ") +
                                  e.what());
  }
  if (!j.contains("scores") || !j["scores"].is_object())
    throw verifier_protocol_error("malformed response: missing 'scores'");

  VerifierReport report;
  for (int e = 0; e < cs.entity_count(); ++e) {
    const std::string& surface = cs.entities[e].surface;
    if (!j["scores"].contains(surface))
      throw verifier_validation_error("response missing entity '" + surface +
                                      "'");
    const auto& s = j["scores"][surface];
    EntityScores es;
    try {
      es.missing = s.at("missing").get<double>();
      es.attribute = s.at("attribute").get<double>();
      es.spatial = s.at("spatial").get<double>();
    } catch (const nlohmann::json::exception& ex) {
      throw verifier_protocol_error(std::string("malformed response: ") +
                                    ex.what());
    }
    for (double v : {es.missing, es.attribute, es.spatial})
      if (!(v >= 0.0 && v <= 1.0))
        throw verifier_validation_error("score out of range for entity '" +
                                        surface + "'");
    report.scores[e] = es;
  }
  return report;
}

// One request/response round trip against `command` run through the shell.
inline VerifierReport exec_verify(const std::string& command,
                                  const ConstraintSet& cs,
                                  const std::string& render_pgm) {
  const std::string request = make_verifier_request(cs, render_pgm).dump();

  int to_child[2], from_child[2];
  if (pipe(to_child) != 0 || pipe(from_child) != 0)
    throw verifier_transport_error("exec verifier: pipe failed");

  const pid_t pid = fork();
  if (pid < 0) throw verifier_transport_error("exec verifier: fork failed");
  if (pid == 0) {
    dup2(to_child[0], STDIN_FILENO);
    dup2(from_child[1], STDOUT_FILENO);
    close(to_child[0]);
    close(to_child[1]);
    close(from_child[0]);
    close(from_child[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), nullptr);
    _exit(127);
  }
  close(to_child[0]);
  close(from_child[1]);

  std::string line = request + "\n";
  size_t off = 0;
  while (off < line.size()) {
    const ssize_t n = write(to_child[1], line.data() + off, line.size() - off);
    if (n <= 0) break;
    off += static_cast<size_t>(n);
  }
  close(to_child[1]);

  std::string response;
  char buf[4096];
  ssize_t n;
  while ((n = read(from_child[0], buf, sizeof buf)) > 0)
    response.append(buf, static_cast<size_t>(n));
  close(from_child[0]);

  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw verifier_transport_error("exec verifier: child failed (" + command +
                                   ")");
  if (const auto nl = response.find('\n'); nl != std::string::npos)
    response.resize(nl);
  if (response.empty())
    throw verifier_transport_error("exec verifier: empty response");
  return parse_verifier_response(response, cs);
}

}  // namespace ear
