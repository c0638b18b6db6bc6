#ifndef XPROTONET_CLI_HPP_
#define XPROTONET_CLI_HPP_

namespace xprotonet {

/// Exit codes of the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 1;
inline constexpr int kExitRuntimeError = 2;

/// Entry point of the xprotonet tool: synth-data, train, train-prior,
/// evaluate, project, prune, explain and compare-baselines.
int cli_main(int argc, char** argv);

}  // namespace xprotonet

#endif  // XPROTONET_CLI_HPP_
