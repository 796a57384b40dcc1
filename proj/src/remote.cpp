#include "eva/remote.hpp"

#include "httplib.h"
#include "json.hpp"

namespace eva {

TokenIdentification fetch_remote_identification(const std::vector<int>& query,
                                                const HarmLexicon& lexicon,
                                                const IdentifierEndpoint& endpoint) {
  if (query.empty()) throw ValidationError("fetch_remote_identification: empty query");
  nlohmann::json request{{"query_tokens", query}, {"categories", nlohmann::json::array()}};
  for (const auto& [name, toks] : lexicon.categories) request["categories"].push_back(name);
  const std::string body = request.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
    httplib::Client client(endpoint.host, endpoint.port);
    client.set_connection_timeout(0, endpoint.timeout_ms * 1000);
    client.set_read_timeout(0, endpoint.timeout_ms * 1000);
    client.set_write_timeout(0, endpoint.timeout_ms * 1000);
    auto res = client.Post(endpoint.path, body, "application/json");
    if (!res) {
      last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw IdentifierError(std::string("identifier returned malformed JSON: ") + e.what());
    }
    if (!reply.contains("position") || !reply.contains("token"))
      throw IdentifierError("identifier response missing required fields");
    TokenIdentification id;
    id.position = reply.at("position").get<int>();
    id.token = reply.at("token").get<int>();
    id.category = reply.value("category", "");
    if (id.position < 0 || id.position >= static_cast<int>(query.size()))
      throw IdentifierError("identifier returned out-of-range position " +
                            std::to_string(id.position));
    if (query[id.position] != id.token)
      throw IdentifierError("identifier verdict disagrees with query: token " +
                            std::to_string(id.token) + " not at position " +
                            std::to_string(id.position));
    return id;
  }
  throw IdentifierError("identifier unreachable after " + std::to_string(endpoint.retries + 1) +
                        " attempts: " + last_error);
}

}  // namespace eva
