#pragma once

// HTTP transport for the external verifier protocol: POST the request
// document to a URL, parse and validate the JSON response.

#include "ear/verifier_client.hpp"

#include <httplib.h>

#include <string>

namespace ear {

inline VerifierReport http_verify(const std::string& url,
                                  const ConstraintSet& cs,
                                  const std::string& render_pgm) {
  // split scheme://host:port/path
  std::string rest = url;
  if (rest.rfind("http://", 0) == 0) rest = rest.substr(7);
  const auto slash = rest.find('/');
  const std::string host = rest.substr(0, slash);
  const std::string path =
      slash == std::string::npos ? "/" : rest.substr(slash);

  httplib::Client client(("http://" + host).c_str());
  client.set_connection_timeout(5);
  client.set_read_timeout(30);

  const std::string body = make_verifier_request(cs, render_pgm).dump();
  auto res = client.Post(path.c_str(), body, "application/json");
  if (!res)
    throw verifier_transport_error("http verifier: cannot reach " + url);
  if (res->status != 200)
    throw verifier_transport_error("http verifier: status " +
                                   std::to_string(res->status));
  return parse_verifier_response(res->body, cs);
}

}  // namespace ear
