#pragma once

#include <string>
#include <vector>

#include "eva/keys.hpp"

namespace eva {

// HTTP JSON contract for the external harmful-token identifier:
//   request  {"query_tokens": [int], "categories": [string]}
//   response {"position": int, "token": int, "category": string}
struct IdentifierEndpoint {
  std::string host;
  int port = 0;
  std::string path = "/identify";
  int timeout_ms = 1000;
  int retries = 2;  // attempts after the first failure
};

// Asks the remote identifier and validates its verdict against the query;
// the remote answer is never trusted blindly.
TokenIdentification fetch_remote_identification(const std::vector<int>& query,
                                                const HarmLexicon& lexicon,
                                                const IdentifierEndpoint& endpoint);

}  // namespace eva
