// userland.hpp - the guest programs shipped with the emulator.
//
// Utilities: cat cp echo grep head ls mkdir rm rmdir sha1sum sort stat tail
// tee touch wc xargs, plus true false sleep env-echo.
// Shell: sh, also registered as the /bin/sh interpreter.
// Demos: forktest, httpd, echosrv.
//
// Flag subsets are listed by each program's --help.
#pragma once

#include "sandboxd/worker.hpp"

namespace sandboxd {

void register_userland(ProgramRegistry& reg);
ProgramRegistry make_registry();

}  // namespace sandboxd
