# Tests for semcache
