// Stub external verifier for tests and demos: reads one request line from
// standard input and reports every entity as proper (all scores zero).

#include <json.hpp>

#include <iostream>
#include <string>

int main() {
  std::string line;
  if (!std::getline(std::cin, line)) {
    std::cerr << "echo_verifier: no request on stdin\n";
    return 1;
  }
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    std::cerr << "echo_verifier: bad request: " << e.what() << "\n";
    return 1;
  }

  nlohmann::json scores = nlohmann::json::object();
  for (const auto& entity : request.value("entities", nlohmann::json::array()))
    scores[entity.at("surface").get<std::string>()] = {
        {"missing", 0.0}, {"attribute", 0.0}, {"spatial", 0.0}};

  std::cout << nlohmann::json{{"scores", scores}}.dump() << "\n";
  return 0;
}
